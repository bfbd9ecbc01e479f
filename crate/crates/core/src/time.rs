//! Integer microsecond time base shared by the graph and sim modules.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A point in time or a duration, in whole microseconds.
///
/// Scheduling comparisons are done on integers so that two runs over the
/// same inputs can never disagree because of float rounding. Values are
/// read and written in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Micros(pub u64);

impl Micros {
    pub const ZERO: Micros = Micros(0);

    pub const fn from_us(us: u64) -> Self {
        Micros(us)
    }

    pub const fn from_ms(ms: u64) -> Self {
        Micros(ms * 1000)
    }

    /// Converts a (possibly fractional) millisecond value, rounding to the
    /// nearest microsecond. Returns `None` for negative or non-finite input.
    pub fn from_ms_f64(ms: f64) -> Option<Self> {
        if !ms.is_finite() || ms < 0.0 {
            return None;
        }
        let us = (ms * 1000.0).round();
        if us > u64::MAX as f64 {
            return None;
        }
        Some(Micros(us as u64))
    }

    pub const fn as_us(self) -> u64 {
        self.0
    }

    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn saturating_sub(self, rhs: Micros) -> Micros {
        Micros(self.0.saturating_sub(rhs.0))
    }
}

impl Add for Micros {
    type Output = Micros;

    fn add(self, rhs: Micros) -> Micros {
        Micros(self.0 + rhs.0)
    }
}

impl Sub for Micros {
    type Output = Micros;

    fn sub(self, rhs: Micros) -> Micros {
        Micros(self.0 - rhs.0)
    }
}

/// Formats as milliseconds: `810` for 810 ms exactly, `0.25` for 250 µs.
impl fmt::Display for Micros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / 1000;
        let frac = self.0 % 1000;
        if frac == 0 {
            write!(f, "{whole}")
        } else {
            let digits = format!("{frac:03}");
            write!(f, "{whole}.{}", digits.trim_end_matches('0'))
        }
    }
}

impl Serialize for Micros {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.0.is_multiple_of(1000) {
            serializer.serialize_u64(self.0 / 1000)
        } else {
            serializer.serialize_f64(self.as_ms_f64())
        }
    }
}

impl<'de> Deserialize<'de> for Micros {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let ms = f64::deserialize(deserializer)?;
        Micros::from_ms_f64(ms).ok_or_else(|| {
            serde::de::Error::custom(format!("invalid millisecond value {ms}"))
        })
    }
}
