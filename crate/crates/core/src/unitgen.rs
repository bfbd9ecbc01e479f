//! Text generators for the init system: stage unit files, unit
//! configuration scripts and shutdown commands.
//!
//! Nothing here touches the host. Every function returns text for an
//! operator to review and install.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{validate_manifest, AppManifest, ValidationReport};

const BUILTIN_CATALOG: &str = include_str!("../../../fixtures/catalog.json");

#[derive(Debug, Error)]
pub enum UnitGenError {
    #[error("invalid manifest: {0}")]
    InvalidManifest(ValidationReport),
    #[error("{kind} {value:?} contains characters outside [A-Za-z0-9_-]")]
    UnsafeId { kind: &'static str, value: String },
    #[error("{kind} {value:?} must be a single non-empty line")]
    UnsafeField { kind: &'static str, value: String },
    #[error("profile {profile} references unit {unit}, which is not in the catalog")]
    UnknownUnit { profile: ProfileName, unit: String },
    #[error("catalog lists unit {0} more than once")]
    DuplicateUnit(String),
    #[error("essential unit {0} must have disable_action \"keep\"")]
    EssentialNotKept(String),
    #[error("unknown profile {0:?}")]
    UnknownProfile(String),
    #[error("unknown shutdown mode {0:?}")]
    UnknownShutdownMode(String),
    #[error("malformed catalog: {0}")]
    Catalog(#[from] serde_json::Error),
}

fn check_id(kind: &'static str, value: &str) -> Result<(), UnitGenError> {
    let ok = !value.is_empty()
        && value
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
    if ok {
        Ok(())
    } else {
        Err(UnitGenError::UnsafeId {
            kind,
            value: value.to_owned(),
        })
    }
}

fn check_line(kind: &'static str, value: &str) -> Result<(), UnitGenError> {
    if value.trim().is_empty() || value.contains(['\n', '\r']) {
        Err(UnitGenError::UnsafeField {
            kind,
            value: value.to_owned(),
        })
    } else {
        Ok(())
    }
}

fn check_unit_name(value: &str) -> Result<(), UnitGenError> {
    if value.is_empty() || value.chars().any(|c| c.is_whitespace() || c.is_control()) {
        Err(UnitGenError::UnsafeField {
            kind: "unit name",
            value: value.to_owned(),
        })
    } else {
        Ok(())
    }
}

pub fn stage_unit_name(app_id: &str, stage_id: &str) -> String {
    format!("pallex-{app_id}-{stage_id}.service")
}

/// Renders one `.service` file per stage, keyed by file name.
///
/// Only unit dependencies are written as `Requires=`/`After=`. Ordering
/// between stages is left to the socket rendezvous: a producer stays alive
/// while it waits for its consumers, so ordering stage units on completion
/// would deadlock.
pub fn emit_stage_units(
    m: &AppManifest,
    runtime_dir: &str,
) -> Result<BTreeMap<String, String>, UnitGenError> {
    let report = validate_manifest(m);
    if !report.is_ok() {
        return Err(UnitGenError::InvalidManifest(report));
    }
    check_id("app id", &m.app_id)?;
    check_line("runtime dir", runtime_dir)?;

    let mut files = BTreeMap::new();
    for stage in &m.stages {
        check_id("stage id", &stage.id)?;
        check_line("command", &stage.command)?;
        for unit in &stage.unit_deps {
            check_unit_name(unit)?;
        }

        let mut text = String::new();
        text.push_str("[Unit]\n");
        text.push_str(&format!(
            "Description=Pallex stage {} of {}\n",
            stage.id, m.app_id
        ));
        if !stage.unit_deps.is_empty() {
            // BTreeSet iteration is already sorted.
            let deps = stage
                .unit_deps
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>()
                .join(" ");
            text.push_str(&format!("Requires={deps}\n"));
            text.push_str(&format!("After={deps}\n"));
        }
        text.push_str("\n[Service]\n");
        text.push_str("Type=simple\n");
        text.push_str(&format!("Environment=PALLEX_RUNTIME_DIR={runtime_dir}\n"));
        text.push_str(&format!("ExecStart={}\n", stage.command));
        text.push_str("\n[Install]\n");
        text.push_str("WantedBy=multi-user.target\n");

        files.insert(stage_unit_name(&m.app_id, &stage.id), text);
    }
    Ok(files)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "EU")]
    Essential,
    #[serde(rename = "NRS")]
    Networking,
    #[serde(rename = "MEMORY")]
    Memory,
    #[serde(rename = "IO")]
    Io,
    #[serde(rename = "MISC")]
    Misc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisableAction {
    Keep,
    Disable,
    /// For units that get pulled in even when disabled.
    Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitCatalogEntry {
    pub unit_name: String,
    pub category: Category,
    pub disable_action: DisableAction,
    #[serde(default)]
    pub note: String,
}

/// A validated set of catalog entries, sorted by unit name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    entries: Vec<UnitCatalogEntry>,
}

impl Catalog {
    pub fn new(mut entries: Vec<UnitCatalogEntry>) -> Result<Self, UnitGenError> {
        entries.sort_by(|a, b| a.unit_name.cmp(&b.unit_name));
        for pair in entries.windows(2) {
            if pair[0].unit_name == pair[1].unit_name {
                return Err(UnitGenError::DuplicateUnit(pair[0].unit_name.clone()));
            }
        }
        for e in &entries {
            check_unit_name(&e.unit_name)?;
            if e.category == Category::Essential && e.disable_action != DisableAction::Keep {
                return Err(UnitGenError::EssentialNotKept(e.unit_name.clone()));
            }
        }
        Ok(Catalog { entries })
    }

    pub fn from_json(text: &str) -> Result<Self, UnitGenError> {
        Catalog::new(serde_json::from_str(text)?)
    }

    /// The Raspbian Stretch Lite unit catalog shipped with the crate.
    pub fn builtin() -> Self {
        Catalog::from_json(BUILTIN_CATALOG).expect("built-in catalog is valid")
    }

    pub fn entries(&self) -> &[UnitCatalogEntry] {
        &self.entries
    }

    pub fn get(&self, unit: &str) -> Option<&UnitCatalogEntry> {
        self.entries
            .binary_search_by(|e| e.unit_name.as_str().cmp(unit))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn unit_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.unit_name.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProfileName {
    Eu,
    EuMms,
    EuNet1,
    EuNet2,
    EuNet3,
    Allu,
    AlluNoNet3,
}

impl ProfileName {
    pub const ALL: [ProfileName; 7] = [
        ProfileName::Eu,
        ProfileName::EuMms,
        ProfileName::EuNet1,
        ProfileName::EuNet2,
        ProfileName::EuNet3,
        ProfileName::Allu,
        ProfileName::AlluNoNet3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProfileName::Eu => "EU",
            ProfileName::EuMms => "EU+MMS",
            ProfileName::EuNet1 => "EU+NET1",
            ProfileName::EuNet2 => "EU+NET2",
            ProfileName::EuNet3 => "EU+NET3",
            ProfileName::Allu => "ALLU",
            ProfileName::AlluNoNet3 => "ALLU-NET3",
        }
    }
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProfileName {
    type Err = UnitGenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProfileName::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnitGenError::UnknownProfile(s.to_owned()))
    }
}

const NET1: &[&str] = &["networking.service"];
const NET2: &[&str] = &["networking.service", "sshd.service"];
const NET3: &[&str] = &["bluetoothd.service", "hciuart.service"];
const MMS: &[&str] = &["dphys-swapfile.service"];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Base {
    Essential,
    All,
}

/// A unit configuration: which catalog units stay enabled.
///
/// Essential units are always enabled. `EU+*` profiles add named units on
/// top of them; `ALLU*` profiles start from the whole catalog and may drop
/// some.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigProfile {
    pub name: ProfileName,
    base: Base,
    include: BTreeSet<String>,
    exclude: BTreeSet<String>,
}

impl ConfigProfile {
    pub fn new(name: ProfileName) -> Self {
        let (base, include, exclude): (Base, &[&str], &[&str]) = match name {
            ProfileName::Eu => (Base::Essential, &[], &[]),
            ProfileName::EuMms => (Base::Essential, MMS, &[]),
            ProfileName::EuNet1 => (Base::Essential, NET1, &[]),
            ProfileName::EuNet2 => (Base::Essential, NET2, &[]),
            ProfileName::EuNet3 => (Base::Essential, NET3, &[]),
            ProfileName::Allu => (Base::All, &[], &[]),
            ProfileName::AlluNoNet3 => (Base::All, &[], NET3),
        };
        let set = |s: &[&str]| s.iter().map(|u| u.to_string()).collect();
        ConfigProfile {
            name,
            base,
            include: set(include),
            exclude: set(exclude),
        }
    }

    /// Splits the catalog into enabled, disabled and masked units.
    pub fn resolve(&self, catalog: &Catalog) -> Result<ResolvedProfile, UnitGenError> {
        for unit in self.include.iter().chain(&self.exclude) {
            if catalog.get(unit).is_none() {
                return Err(UnitGenError::UnknownUnit {
                    profile: self.name,
                    unit: unit.clone(),
                });
            }
        }

        let mut out = ResolvedProfile::default();
        for e in catalog.entries() {
            let name = e.unit_name.clone();
            let enabled = match e.category {
                Category::Essential => true,
                _ => match self.base {
                    Base::Essential => self.include.contains(&name),
                    Base::All => !self.exclude.contains(&name),
                },
            };
            if enabled || e.disable_action == DisableAction::Keep {
                out.enabled.insert(name);
            } else if e.disable_action == DisableAction::Mask {
                out.masked.insert(name);
            } else {
                out.disabled.insert(name);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResolvedProfile {
    pub enabled: BTreeSet<String>,
    pub disabled: BTreeSet<String>,
    pub masked: BTreeSet<String>,
}

/// `systemctl` commands that apply a profile: a disable for every unit left
/// out of the enabled set, then a mask for each mask-flagged one. Each group
/// is sorted by unit name.
///
/// Masked units are disabled too, because some of them are pulled in by
/// other units even while disabled.
pub fn emit_config_script(
    profile: &ConfigProfile,
    catalog: &Catalog,
) -> Result<Vec<String>, UnitGenError> {
    let resolved = profile.resolve(catalog)?;
    let off: BTreeSet<&String> = resolved.disabled.iter().chain(&resolved.masked).collect();
    let disables = off.into_iter().map(|u| format!("systemctl disable {u}"));
    let masks = resolved.masked.iter().map(|u| format!("systemctl mask {u}"));
    Ok(disables.chain(masks).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShutdownMode {
    Graceful,
    Forced,
    ForcedForced,
}

impl ShutdownMode {
    pub fn command_line(self) -> &'static str {
        match self {
            ShutdownMode::Graceful => "systemctl poweroff",
            ShutdownMode::Forced => "systemctl halt --force",
            ShutdownMode::ForcedForced => "systemctl halt --force --force",
        }
    }
}

impl FromStr for ShutdownMode {
    type Err = UnitGenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "graceful" => Ok(ShutdownMode::Graceful),
            "forced" => Ok(ShutdownMode::Forced),
            "forced_forced" => Ok(ShutdownMode::ForcedForced),
            _ => Err(UnitGenError::UnknownShutdownMode(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShutdownCommand {
    pub command: &'static str,
    /// Advisory lines for the operator; empty for a graceful shutdown.
    pub risk_notes: Vec<&'static str>,
}

pub fn shutdown_command(mode: ShutdownMode) -> ShutdownCommand {
    let risk_notes = match mode {
        ShutdownMode::Graceful => vec![],
        ShutdownMode::Forced => vec![
            "processes are killed without notice and shutdown logging is skipped",
            "run `fake-hwclock save` and `systemd-random-seed save` before halting",
        ],
        ShutdownMode::ForcedForced => vec![
            "WARNING: halts without unmounting filesystems; this may cause data corruption",
            "stop the application's processes first",
            "run `sync` to flush unsaved buffers to the SD card",
            "run `fake-hwclock save` and `systemd-random-seed save` manually",
            "keep spare free space on the SD card to reduce wear-leveling block moves",
        ],
    };
    ShutdownCommand {
        command: mode.command_line(),
        risk_notes,
    }
}
