//! Energy accounting: power-trace integration, completion-marker detection,
//! phase segmentation, power synthesis from simulated timelines, and the
//! battery lifetime model.
//!
//! Power is in milliwatts and timestamps in microseconds, so one sample
//! interval contributes `mW * µs = 1e-9 J`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::sim::Timeline;

const MW_US_TO_J: f64 = 1e-9;

/// Current and voltage resolution of the measurement shield in 12-bit mode.
pub const CURRENT_RESOLUTION_UA: f64 = 100.0;
pub const VOLTAGE_RESOLUTION_MV: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("power trace is empty")]
    EmptyTrace,
    #[error("timestamps must be strictly increasing (sample {index})")]
    NonIncreasingTimestamp { index: usize },
    #[error("power at sample {index} is {value}; it must be finite and non-negative")]
    InvalidPower { index: usize, value: f64 },
    #[error("window [{start}, {end}] is inverted")]
    InvertedWindow { start: u64, end: u64 },
    #[error("window [{start}, {end}] lies outside the trace span [{first}, {last}]")]
    WindowOutsideTrace {
        start: u64,
        end: u64,
        first: u64,
        last: u64,
    },
    #[error("segment boundaries must be strictly increasing and inside the trace span")]
    BadBoundaries,
    #[error("sample rate must be positive and at most 1 MHz, got {0}")]
    InvalidSampleRate(f64),
    #[error("power model parameters must be finite and non-negative")]
    InvalidModel,
    #[error("timeline is empty")]
    EmptyTimeline,
    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("invalid marker parameters: {0}")]
    MarkerParams(String),
    #[error("per-cycle energy must be positive")]
    ZeroCycleEnergy,
    #[error("cycles per hour must be at least 1, got {0}")]
    TooFewCycles(f64),
    #[error("{0} must be finite and non-negative")]
    NegativeParameter(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerSample {
    pub t_us: u64,
    pub power_mw: f64,
}

/// Time-ordered power samples. Each sample holds until the next one.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PowerTrace {
    samples: Vec<PowerSample>,
}

impl PowerTrace {
    pub fn new(samples: Vec<PowerSample>) -> Result<Self, EnergyError> {
        for (index, s) in samples.iter().enumerate() {
            if !s.power_mw.is_finite() || s.power_mw < 0.0 {
                return Err(EnergyError::InvalidPower {
                    index,
                    value: s.power_mw,
                });
            }
            if index > 0 && samples[index - 1].t_us >= s.t_us {
                return Err(EnergyError::NonIncreasingTimestamp { index });
            }
        }
        Ok(PowerTrace { samples })
    }

    /// Builds a trace from `(timestamp µs, voltage mV, current µA)` rows.
    ///
    /// With `quantize` set, readings are first rounded to the shield's
    /// 4 mV / 100 µA resolution.
    pub fn from_voltage_current(
        rows: &[(u64, f64, f64)],
        quantize: bool,
    ) -> Result<Self, EnergyError> {
        let q = |v: f64, step: f64| if quantize { (v / step).round() * step } else { v };
        let samples = rows
            .iter()
            .map(|&(t_us, mv, ua)| PowerSample {
                t_us,
                // mV * µA = nW
                power_mw: q(mv, VOLTAGE_RESOLUTION_MV) * q(ua, CURRENT_RESOLUTION_UA) * 1e-6,
            })
            .collect();
        PowerTrace::new(samples)
    }

    /// Parses `timestamp_us,power_mw` or `timestamp_us,voltage_mv,current_ua`.
    pub fn from_csv(text: &str, quantize: bool) -> Result<Self, EnergyError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(EnergyError::EmptyTrace)?;
        let columns: Vec<&str> = header.split(',').map(str::trim).collect();
        match columns.as_slice() {
            ["timestamp_us", "power_mw"] => {
                let mut samples = Vec::new();
                for (i, line) in lines {
                    let f = parse_row(line, i + 1, 2)?;
                    samples.push(PowerSample {
                        t_us: to_timestamp(f[0], i + 1)?,
                        power_mw: f[1],
                    });
                }
                PowerTrace::new(samples)
            }
            ["timestamp_us", "voltage_mv", "current_ua"] => {
                let mut rows = Vec::new();
                for (i, line) in lines {
                    let f = parse_row(line, i + 1, 3)?;
                    rows.push((to_timestamp(f[0], i + 1)?, f[1], f[2]));
                }
                PowerTrace::from_voltage_current(&rows, quantize)
            }
            _ => Err(EnergyError::Csv {
                line: 1,
                message: format!("unrecognized header {header:?}"),
            }),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestamp_us,power_mw\n");
        for s in &self.samples {
            out.push_str(&format!("{},{}\n", s.t_us, s.power_mw));
        }
        out
    }

    pub fn samples(&self) -> &[PowerSample] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First and last timestamps.
    pub fn span(&self) -> Option<(u64, u64)> {
        Some((self.samples.first()?.t_us, self.samples.last()?.t_us))
    }

    /// Multiplies every power value by `factor` (which must be ≥ 0).
    pub fn scaled(&self, factor: f64) -> Result<Self, EnergyError> {
        PowerTrace::new(
            self.samples
                .iter()
                .map(|s| PowerSample {
                    t_us: s.t_us,
                    power_mw: s.power_mw * factor,
                })
                .collect(),
        )
    }
}

fn parse_row(line: &str, line_no: usize, width: usize) -> Result<Vec<f64>, EnergyError> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != width {
        return Err(EnergyError::Csv {
            line: line_no,
            message: format!("expected {width} fields, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>().map_err(|e| EnergyError::Csv {
                line: line_no,
                message: format!("{f:?}: {e}"),
            })
        })
        .collect()
}

fn to_timestamp(v: f64, line: usize) -> Result<u64, EnergyError> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
        Ok(v as u64)
    } else {
        Err(EnergyError::Csv {
            line,
            message: format!("timestamp {v} is not a non-negative integer"),
        })
    }
}

/// Left-Riemann accumulator for streaming samples in constant memory.
#[derive(Debug, Clone, Default)]
pub struct EnergyAccumulator {
    last: Option<PowerSample>,
    mw_us: f64,
}

impl EnergyAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a sample; the previous sample's power is held until `t_us`.
    pub fn push(&mut self, sample: PowerSample) {
        if let Some(prev) = self.last {
            self.mw_us += prev.power_mw * sample.t_us.saturating_sub(prev.t_us) as f64;
        }
        self.last = Some(sample);
    }

    pub fn joules(&self) -> f64 {
        self.mw_us * MW_US_TO_J
    }
}

/// Energy in joules between `window` (or the whole trace), holding each
/// sample's power until the next sample.
pub fn integrate_power(t: &PowerTrace, window: Option<(u64, u64)>) -> Result<f64, EnergyError> {
    let (first, last) = t.span().ok_or(EnergyError::EmptyTrace)?;
    let (start, end) = window.unwrap_or((first, last));
    if start > end {
        return Err(EnergyError::InvertedWindow { start, end });
    }
    if start < first || end > last {
        return Err(EnergyError::WindowOutsideTrace {
            start,
            end,
            first,
            last,
        });
    }

    let s = &t.samples;
    // Last sample at or before `start`.
    let mut i = s.partition_point(|x| x.t_us <= start).saturating_sub(1);
    let mut acc = EnergyAccumulator::new();
    acc.push(PowerSample {
        t_us: start,
        power_mw: s[i].power_mw,
    });
    i += 1;
    while i < s.len() && s[i].t_us < end {
        acc.push(s[i]);
        i += 1;
    }
    acc.push(PowerSample {
        t_us: end,
        power_mw: 0.0,
    });
    Ok(acc.joules())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub index: usize,
    pub start_us: u64,
    pub end_us: u64,
    pub energy_j: f64,
}

/// Energy of each window between consecutive cut points. The trace's first
/// and last timestamps close the outer windows.
pub fn segment_phases(t: &PowerTrace, boundaries: &[u64]) -> Result<Vec<Segment>, EnergyError> {
    let (first, last) = t.span().ok_or(EnergyError::EmptyTrace)?;
    let increasing = boundaries.windows(2).all(|w| w[0] < w[1]);
    let inside = boundaries.iter().all(|&b| (first..=last).contains(&b));
    if !increasing || !inside {
        return Err(EnergyError::BadBoundaries);
    }

    let mut cuts = Vec::with_capacity(boundaries.len() + 2);
    cuts.push(first);
    cuts.extend_from_slice(boundaries);
    cuts.push(last);

    cuts.windows(2)
        .enumerate()
        .map(|(index, w)| {
            Ok(Segment {
                index,
                start_us: w[0],
                end_us: w[1],
                energy_j: integrate_power(t, Some((w[0], w[1])))?,
            })
        })
        .collect()
}

pub fn segments_csv(segments: &[Segment]) -> String {
    let mut out = String::from("segment,start_us,end_us,energy_j\n");
    for s in segments {
        out.push_str(&format!(
            "{},{},{},{:.3}\n",
            s.index, s.start_us, s.end_us, s.energy_j
        ));
    }
    out
}

/// Board power as a baseline plus a per-busy-core term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerModel {
    pub p_base_mw: f64,
    pub p_core_mw: f64,
}

/// Samples `p_base + p_core * (summed demand of running compute events)`
/// uniformly from time zero, with a closing sample at the timeline's total.
pub fn synthesize_power(
    t: &Timeline,
    model: PowerModel,
    sample_rate_hz: f64,
) -> Result<PowerTrace, EnergyError> {
    let valid = |v: f64| v.is_finite() && v >= 0.0;
    if !valid(model.p_base_mw) || !valid(model.p_core_mw) {
        return Err(EnergyError::InvalidModel);
    }
    if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0 && sample_rate_hz <= 1e6) {
        return Err(EnergyError::InvalidSampleRate(sample_rate_hz));
    }
    let total = t.total().as_us();
    if t.events.is_empty() || total == 0 {
        return Err(EnergyError::EmptyTimeline);
    }

    // (time, demand delta) sorted by time; ends before starts at equal times
    // so a sample taken at a boundary sees the state after it.
    let mut changes: Vec<(u64, f64)> = t
        .events
        .iter()
        .filter(|e| e.kind.is_compute() && e.end > e.start)
        .flat_map(|e| [(e.start.as_us(), e.cpu_demand), (e.end.as_us(), -e.cpu_demand)])
        .collect();
    changes.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let period_us = 1e6 / sample_rate_hz;
    let mut samples = Vec::with_capacity((total as f64 / period_us) as usize + 2);
    let mut demand = 0.0;
    let mut next_change = 0;
    let mut power_at = |ts: u64| {
        while next_change < changes.len() && changes[next_change].0 <= ts {
            demand += changes[next_change].1;
            next_change += 1;
        }
        // clamp float residue from repeated +/- of the same demand
        let d = if demand.abs() < 1e-9 { 0.0 } else { demand };
        model.p_base_mw + model.p_core_mw * d
    };

    let mut i: u64 = 0;
    loop {
        let ts = (i as f64 * period_us).round() as u64;
        if ts >= total {
            break;
        }
        samples.push(PowerSample {
            t_us: ts,
            power_mw: power_at(ts),
        });
        i += 1;
    }
    samples.push(PowerSample {
        t_us: total,
        power_mw: power_at(total),
    });
    PowerTrace::new(samples)
}

/// A bit string such as `10101100`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPattern(Vec<bool>);

impl BitPattern {
    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of level changes between consecutive bits.
    pub fn transitions(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

impl FromStr for BitPattern {
    type Err = EnergyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(EnergyError::MarkerParams(format!(
                    "pattern may only contain 0 and 1, found {other:?}"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(BitPattern)
    }
}

impl fmt::Display for BitPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Samples of a digital input line.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitalTrace {
    samples: Vec<(u64, bool)>,
    sample_rate_hz: f64,
}

impl DigitalTrace {
    pub fn new(samples: Vec<(u64, bool)>, sample_rate_hz: f64) -> Result<Self, EnergyError> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(EnergyError::InvalidSampleRate(sample_rate_hz));
        }
        for index in 1..samples.len() {
            if samples[index - 1].0 >= samples[index].0 {
                return Err(EnergyError::NonIncreasingTimestamp { index });
            }
        }
        Ok(DigitalTrace {
            samples,
            sample_rate_hz,
        })
    }

    /// Parses `timestamp_us,level`. Without an explicit rate it is taken
    /// from the mean sample spacing.
    pub fn from_csv(text: &str, sample_rate_hz: Option<f64>) -> Result<Self, EnergyError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == "timestamp_us,level" => {}
            Some((_, h)) => {
                return Err(EnergyError::Csv {
                    line: 1,
                    message: format!("unrecognized header {h:?}"),
                })
            }
            None => return DigitalTrace::new(Vec::new(), sample_rate_hz.unwrap_or(1000.0)),
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            let f = parse_row(line, i + 1, 2)?;
            let level = match f[1] {
                0.0 => false,
                1.0 => true,
                v => {
                    return Err(EnergyError::Csv {
                        line: i + 1,
                        message: format!("level must be 0 or 1, found {v}"),
                    })
                }
            };
            samples.push((to_timestamp(f[0], i + 1)?, level));
        }
        let rate = match sample_rate_hz {
            Some(r) => r,
            None if samples.len() >= 2 => {
                let span = (samples[samples.len() - 1].0 - samples[0].0) as f64;
                1e6 * (samples.len() - 1) as f64 / span
            }
            None => 1000.0,
        };
        DigitalTrace::new(samples, rate)
    }

    pub fn samples(&self) -> &[(u64, bool)] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    /// Level changes between consecutive samples.
    pub fn transitions(&self) -> usize {
        self.samples.windows(2).filter(|w| w[0].1 != w[1].1).count()
    }
}

/// Finds the earliest occurrence of `pattern` sent at one bit per
/// `bit_period_us`, returning the timestamp of its first bit.
///
/// Candidate starts are the samples where the line changes to the
/// pattern's first bit. Each bit is decoded by majority vote over the
/// samples in its window; an even split or an empty window rejects the
/// candidate, so a lone edge or glitch never decodes as the full pattern.
pub fn detect_marker(
    d: &DigitalTrace,
    pattern: &BitPattern,
    bit_period_us: u64,
) -> Result<Option<u64>, EnergyError> {
    if pattern.len() < 2 {
        return Err(EnergyError::MarkerParams(
            "pattern needs at least two bits".into(),
        ));
    }
    let sample_interval_us = 1e6 / d.sample_rate_hz;
    if (bit_period_us as f64) < 2.0 * sample_interval_us {
        return Err(EnergyError::MarkerParams(format!(
            "bit period {bit_period_us} µs is shorter than two sample intervals ({sample_interval_us} µs each)"
        )));
    }

    let s = &d.samples;
    let mut ones_before = Vec::with_capacity(s.len() + 1);
    ones_before.push(0usize);
    for &(_, level) in s {
        ones_before.push(ones_before.last().unwrap() + level as usize);
    }
    let decode = |from: u64, to: u64| -> Option<bool> {
        let lo = s.partition_point(|x| x.0 < from);
        let hi = s.partition_point(|x| x.0 < to);
        let count = hi - lo;
        let ones = ones_before[hi] - ones_before[lo];
        match (2 * ones).cmp(&count) {
            _ if count == 0 => None,
            std::cmp::Ordering::Greater => Some(true),
            std::cmp::Ordering::Less => Some(false),
            std::cmp::Ordering::Equal => None,
        }
    };

    let first_bit = pattern.bits()[0];
    for j in 0..s.len() {
        let (t0, level) = s[j];
        if level != first_bit || (j > 0 && s[j - 1].1 == first_bit) {
            continue;
        }
        let matched = pattern.bits().iter().enumerate().all(|(b, &want)| {
            let from = t0 + b as u64 * bit_period_us;
            decode(from, from + bit_period_us) == Some(want)
        });
        if matched {
            return Ok(Some(t0));
        }
    }
    Ok(None)
}

/// Inputs to the duty-cycle lifetime model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifetimeParams {
    pub battery_capacity_mah: f64,
    pub battery_voltage_v: f64,
    pub e_btl_j: f64,
    pub e_knl_j: f64,
    pub e_user_j: f64,
    pub e_sdn_j: f64,
    pub cycles_per_hour: f64,
}

impl LifetimeParams {
    /// Usable battery energy: 3600 s/h × capacity (Ah) × voltage.
    pub fn battery_energy_j(&self) -> f64 {
        3600.0 * (self.battery_capacity_mah / 1000.0) * self.battery_voltage_v
    }

    pub fn cycle_energy_j(&self) -> f64 {
        self.e_btl_j + self.e_knl_j + self.e_user_j + self.e_sdn_j
    }
}

/// Hours of operation: battery energy over (per-cycle energy × cycles/hour).
pub fn lifetime(p: &LifetimeParams) -> Result<f64, EnergyError> {
    let checks = [
        ("battery capacity", p.battery_capacity_mah),
        ("battery voltage", p.battery_voltage_v),
        ("bootloader energy", p.e_btl_j),
        ("kernel energy", p.e_knl_j),
        ("userspace energy", p.e_user_j),
        ("shutdown energy", p.e_sdn_j),
    ];
    for (name, v) in checks {
        if !v.is_finite() || v < 0.0 {
            return Err(EnergyError::NegativeParameter(name));
        }
    }
    if !(p.cycles_per_hour >= 1.0 && p.cycles_per_hour.is_finite()) {
        return Err(EnergyError::TooFewCycles(p.cycles_per_hour));
    }
    let e = p.cycle_energy_j();
    if e <= 0.0 {
        return Err(EnergyError::ZeroCycleEnergy);
    }
    Ok(p.battery_energy_j() / (e * p.cycles_per_hour))
}
