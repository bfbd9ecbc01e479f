//! Discrete-event model of one boot cycle on a board with `k` cores.
//!
//! The bootloader and kernel phases run back to back from power-on. At the
//! start of userspace the init system begins activating units, and after a
//! fixed initialization delay application stages become eligible too. At
//! every event instant the scheduler admits ready work non-preemptively in
//! priority order (units before stages, each group by name) as long as the
//! summed CPU demand stays within the core count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{cyclic_components, validate_manifest, AppManifest, ValidationReport};
use crate::time::Micros;

/// CPU demand is tracked in millionths of a core so capacity checks are exact.
const DEMAND_SCALE: f64 = 1_000_000.0;

fn default_ordered() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitProfile {
    pub unit_name: String,
    #[serde(rename = "duration_ms")]
    pub duration: Micros,
    #[serde(default)]
    pub unit_deps: BTreeSet<String>,
    pub cpu_demand: f64,
    /// Whether the init system waits for the dependencies before it issues
    /// the activation request. `false` reproduces a misconfigured tree.
    #[serde(default = "default_ordered")]
    pub ordered_after_deps: bool,
}

impl UnitProfile {
    pub fn new(name: impl Into<String>, duration: Micros, cpu_demand: f64) -> Self {
        UnitProfile {
            unit_name: name.into(),
            duration,
            unit_deps: BTreeSet::new(),
            cpu_demand,
            ordered_after_deps: true,
        }
    }

    pub fn with_deps<I, S>(mut self, deps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.unit_deps.extend(deps.into_iter().map(Into::into));
        self
    }

    pub fn unordered(mut self) -> Self {
        self.ordered_after_deps = false;
        self
    }
}

pub fn units_from_json(text: &str) -> Result<Vec<UnitProfile>, serde_json::Error> {
    serde_json::from_str(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    #[serde(rename = "duration_ms")]
    pub duration: Micros,
    pub cpu_demand: f64,
}

pub fn stage_profiles_from_json(
    text: &str,
) -> Result<BTreeMap<String, StageProfile>, serde_json::Error> {
    serde_json::from_str(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootPhases {
    #[serde(rename = "t_btl_ms")]
    pub t_btl: Micros,
    #[serde(rename = "t_knl_ms")]
    pub t_knl: Micros,
    /// Offset into userspace before stages may start.
    #[serde(rename = "systemd_init_delay_ms")]
    pub systemd_init_delay: Micros,
}

impl BootPhases {
    pub const RPI3: BootPhases = BootPhases {
        t_btl: Micros::from_ms(3650),
        t_knl: Micros::from_ms(2850),
        systemd_init_delay: Micros::from_ms(750),
    };

    pub const RPIZW: BootPhases = BootPhases {
        t_btl: Micros::from_ms(3650),
        t_knl: Micros::from_ms(2850),
        systemd_init_delay: Micros::from_ms(1200),
    };

    pub fn preset(name: &str) -> Option<BootPhases> {
        match name.to_ascii_lowercase().as_str() {
            "rpi3" => Some(Self::RPI3),
            "rpizw" => Some(Self::RPIZW),
            _ => None,
        }
    }

    pub fn userspace_start(&self) -> Micros {
        self.t_btl + self.t_knl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cores {
    Finite(u32),
    Unbounded,
}

impl Cores {
    fn capacity(self) -> Option<u64> {
        match self {
            Cores::Finite(k) => Some(k as u64 * DEMAND_SCALE as u64),
            Cores::Unbounded => None,
        }
    }
}

impl fmt::Display for Cores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cores::Finite(k) => write!(f, "{k}"),
            Cores::Unbounded => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Phase,
    Unit,
    StageCompute,
    StageBlocked,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Phase => "phase",
            EventKind::Unit => "unit",
            EventKind::StageCompute => "stage_compute",
            EventKind::StageBlocked => "stage_blocked",
        }
    }

    /// Events that occupy processor capacity.
    pub fn is_compute(self) -> bool {
        !matches!(self, EventKind::StageBlocked)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One interval of activity, in absolute time since power-on.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub task: String,
    pub kind: EventKind,
    pub start: Micros,
    pub end: Micros,
    pub cpu_demand: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub events: Vec<Event>,
    pub cores: Cores,
    pub phases: BootPhases,
}

impl Timeline {
    pub fn userspace_start(&self) -> Micros {
        self.phases.userspace_start()
    }

    /// Duration of userspace initialization: from its start to the last
    /// event end.
    pub fn t_usi(&self) -> Micros {
        let us = self.userspace_start();
        self.events
            .iter()
            .filter(|e| e.kind != EventKind::Phase)
            .map(|e| e.end.saturating_sub(us))
            .max()
            .unwrap_or(Micros::ZERO)
    }

    pub fn total(&self) -> Micros {
        self.userspace_start() + self.t_usi()
    }

    pub fn event(&self, kind: EventKind, task: &str) -> Option<&Event> {
        self.events.iter().find(|e| e.kind == kind && e.task == task)
    }

    pub fn unit(&self, name: &str) -> Option<&Event> {
        self.event(EventKind::Unit, name)
    }

    pub fn stage(&self, id: &str) -> Option<&Event> {
        self.event(EventKind::StageCompute, id)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid manifest: {0}")]
    InvalidManifest(ValidationReport),
    #[error("unit {0} is listed more than once")]
    DuplicateUnit(String),
    #[error("{referenced_by} depends on unknown unit {unit}")]
    UnknownUnit { unit: String, referenced_by: String },
    #[error("unit dependency cycle {{{}}}", .0.join(","))]
    UnitCycle(Vec<String>),
    #[error("no profile for stage {0}")]
    MissingStageProfile(String),
    #[error("cpu_demand of {task} is {demand}; it must lie in [0, 1]")]
    InvalidDemand { task: String, demand: f64 },
    #[error("core count must be at least 1")]
    NoCores,
    #[error("unit {0} does not appear in the timeline")]
    UnitNotInTimeline(String),
}

fn demand_ppm(task: &str, demand: f64) -> Result<u64, SimError> {
    if !(0.0..=1.0).contains(&demand) {
        return Err(SimError::InvalidDemand {
            task: task.to_owned(),
            demand,
        });
    }
    Ok((demand * DEMAND_SCALE).round() as u64)
}

struct Task {
    name: String,
    kind: EventKind,
    duration: Micros,
    demand: f64,
    demand_ppm: u64,
    /// Indices of tasks that must finish before this one may start.
    deps: Vec<usize>,
    release: Micros,
}

/// Runs the boot-cycle model and returns every phase, unit and stage event.
pub fn simulate_boot(
    units: &[UnitProfile],
    m: &AppManifest,
    stage_profiles: &BTreeMap<String, StageProfile>,
    phases: &BootPhases,
    cores: Cores,
) -> Result<Timeline, SimError> {
    if cores == Cores::Finite(0) {
        return Err(SimError::NoCores);
    }
    let report = validate_manifest(m);
    if !report.is_ok() {
        return Err(SimError::InvalidManifest(report));
    }

    let mut sorted_units: Vec<&UnitProfile> = units.iter().collect();
    sorted_units.sort_by(|a, b| a.unit_name.cmp(&b.unit_name));
    for pair in sorted_units.windows(2) {
        if pair[0].unit_name == pair[1].unit_name {
            return Err(SimError::DuplicateUnit(pair[0].unit_name.clone()));
        }
    }
    let unit_index: BTreeMap<&str, usize> = sorted_units
        .iter()
        .enumerate()
        .map(|(i, u)| (u.unit_name.as_str(), i))
        .collect();

    let mut edges: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for u in &sorted_units {
        for dep in &u.unit_deps {
            if !unit_index.contains_key(dep.as_str()) {
                return Err(SimError::UnknownUnit {
                    unit: dep.clone(),
                    referenced_by: u.unit_name.clone(),
                });
            }
            if dep == &u.unit_name {
                return Err(SimError::UnitCycle(vec![dep.clone()]));
            }
        }
        edges.insert(
            u.unit_name.as_str(),
            u.unit_deps.iter().map(String::as_str).collect(),
        );
    }
    if let Some(cycle) = cyclic_components(&edges).into_iter().next() {
        return Err(SimError::UnitCycle(
            cycle.into_iter().map(str::to_owned).collect(),
        ));
    }

    let us_start = phases.userspace_start();
    let stage_release = us_start + phases.systemd_init_delay;

    let mut tasks: Vec<Task> = Vec::with_capacity(units.len() + m.stages.len());
    for u in &sorted_units {
        tasks.push(Task {
            name: u.unit_name.clone(),
            kind: EventKind::Unit,
            duration: u.duration,
            demand: u.cpu_demand,
            demand_ppm: demand_ppm(&u.unit_name, u.cpu_demand)?,
            deps: u.unit_deps.iter().map(|d| unit_index[d.as_str()]).collect(),
            release: us_start,
        });
    }

    let mut stages: Vec<_> = m.stages.iter().collect();
    stages.sort_by(|a, b| a.id.cmp(&b.id));
    let base = tasks.len();
    let stage_index: BTreeMap<&str, usize> = stages
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), base + i))
        .collect();
    for s in &stages {
        let profile = stage_profiles
            .get(&s.id)
            .ok_or_else(|| SimError::MissingStageProfile(s.id.clone()))?;
        let mut deps = Vec::new();
        for unit in &s.unit_deps {
            let idx = unit_index.get(unit.as_str()).ok_or_else(|| SimError::UnknownUnit {
                unit: unit.clone(),
                referenced_by: format!("stage {}", s.id),
            })?;
            deps.push(*idx);
        }
        deps.extend(s.stage_deps.iter().map(|d| stage_index[d.as_str()]));
        tasks.push(Task {
            name: s.id.clone(),
            kind: EventKind::StageCompute,
            duration: profile.duration,
            demand: profile.cpu_demand,
            demand_ppm: demand_ppm(&s.id, profile.cpu_demand)?,
            deps,
            release: stage_release,
        });
    }

    let spans = schedule(&tasks, us_start, cores.capacity());

    let mut events = vec![
        Event {
            task: "bootloader".into(),
            kind: EventKind::Phase,
            start: Micros::ZERO,
            end: phases.t_btl,
            cpu_demand: 1.0,
        },
        Event {
            task: "kernel".into(),
            kind: EventKind::Phase,
            start: phases.t_btl,
            end: us_start,
            cpu_demand: 1.0,
        },
    ];
    for (task, &(start, end)) in tasks.iter().zip(&spans) {
        events.push(Event {
            task: task.name.clone(),
            kind: task.kind,
            start,
            end,
            cpu_demand: task.demand,
        });
    }

    // A producer stays blocked on its socket until the last consumer starts.
    for s in &stages {
        let compute_end = spans[stage_index[s.id.as_str()]].1;
        let last_consumer_start = m
            .successors(&s.id)
            .into_iter()
            .map(|succ| spans[stage_index[succ]].0)
            .max();
        if let Some(until) = last_consumer_start {
            if until > compute_end {
                events.push(Event {
                    task: s.id.clone(),
                    kind: EventKind::StageBlocked,
                    start: compute_end,
                    end: until,
                    cpu_demand: 0.0,
                });
            }
        }
    }

    Ok(Timeline {
        events,
        cores,
        phases: *phases,
    })
}

/// Greedy non-preemptive list scheduling. Returns (start, end) per task.
fn schedule(tasks: &[Task], t0: Micros, capacity: Option<u64>) -> Vec<(Micros, Micros)> {
    let n = tasks.len();
    let mut span: Vec<Option<(Micros, Micros)>> = vec![None; n];
    let mut done = vec![false; n];
    let mut running: Vec<usize> = Vec::new();
    let mut used: u64 = 0;
    let mut finished = 0usize;
    let mut now = t0;

    while finished < n {
        running.retain(|&i| {
            let (_, end) = span[i].unwrap();
            if end <= now {
                done[i] = true;
                used -= tasks[i].demand_ppm;
                finished += 1;
                false
            } else {
                true
            }
        });

        let mut admitted_instant = false;
        for (i, task) in tasks.iter().enumerate() {
            if span[i].is_some() || task.release > now || !task.deps.iter().all(|&d| done[d]) {
                continue;
            }
            let fits = capacity.is_none_or(|cap| used + task.demand_ppm <= cap);
            if !fits {
                continue;
            }
            span[i] = Some((now, now + task.duration));
            used += task.demand_ppm;
            running.push(i);
            if task.duration == Micros::ZERO {
                admitted_instant = true;
            }
        }
        if admitted_instant || finished == n {
            continue;
        }

        let next_end = running.iter().map(|&i| span[i].unwrap().1).min();
        let next_release = tasks
            .iter()
            .enumerate()
            .filter(|(i, t)| span[*i].is_none() && t.release > now)
            .map(|(_, t)| t.release)
            .min();
        now = match (next_end, next_release) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!("acyclic task graph always makes progress"),
        };
    }

    span.into_iter().map(Option::unwrap).collect()
}

/// Completion minus activation-request time per unit, as an init-system
/// blame tool would report it.
///
/// An unordered unit is requested at the start of userspace, so any time it
/// spends waiting on its dependencies is charged to it.
pub fn blame_report(
    t: &Timeline,
    units: &[UnitProfile],
) -> Result<BTreeMap<String, Micros>, SimError> {
    let completion = |name: &str| {
        t.unit(name)
            .map(|e| e.end)
            .ok_or_else(|| SimError::UnitNotInTimeline(name.to_owned()))
    };
    let us_start = t.userspace_start();
    let mut out = BTreeMap::new();
    for u in units {
        let done = completion(&u.unit_name)?;
        let requested = if u.ordered_after_deps {
            let mut at = us_start;
            for dep in &u.unit_deps {
                at = at.max(completion(dep)?);
            }
            at
        } else {
            us_start
        };
        out.insert(u.unit_name.clone(), done.saturating_sub(requested));
    }
    Ok(out)
}

pub fn blame_csv(blame: &BTreeMap<String, Micros>) -> String {
    let mut out = String::from("unit,blame_ms\n");
    for (unit, ms) in blame {
        out.push_str(&format!("{},{ms}\n", csv_field(unit)));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GanttRow {
    pub task: String,
    pub kind: EventKind,
    pub start: Micros,
    pub end: Micros,
}

pub fn export_gantt(t: &Timeline) -> Vec<GanttRow> {
    let mut rows: Vec<GanttRow> = t
        .events
        .iter()
        .map(|e| GanttRow {
            task: e.task.clone(),
            kind: e.kind,
            start: e.start,
            end: e.end,
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.start, &a.task, a.kind, a.end).cmp(&(b.start, &b.task, b.kind, b.end))
    });
    rows
}

pub const GANTT_HEADER: &str = "task,kind,start_ms,end_ms";

pub fn gantt_csv(rows: &[GanttRow]) -> String {
    let mut out = format!("{GANTT_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(&r.task),
            r.kind,
            r.start,
            r.end
        ));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::fig8;
    use crate::graph::StageSpec;

    const NO_PHASES: BootPhases = BootPhases {
        t_btl: Micros::ZERO,
        t_knl: Micros::ZERO,
        systemd_init_delay: Micros::ZERO,
    };

    fn empty() -> AppManifest {
        AppManifest::new("none", "")
    }

    fn ab(ordered: bool) -> Vec<UnitProfile> {
        let b = UnitProfile::new("B", Micros::from_ms(10), 1.0).with_deps(["A"]);
        vec![
            UnitProfile::new("A", Micros::from_ms(800), 1.0),
            if ordered { b } else { b.unordered() },
        ]
    }

    #[test]
    fn phases_only() {
        let phases = BootPhases {
            systemd_init_delay: Micros::ZERO,
            ..BootPhases::RPI3
        };
        let t = simulate_boot(&[], &empty(), &BTreeMap::new(), &phases, Cores::Finite(4)).unwrap();
        assert_eq!(t.t_usi(), Micros::ZERO);
        assert_eq!(t.total(), Micros::from_ms(6500));
    }

    #[test]
    fn blame_anomaly() {
        let phases = BootPhases::RPI3;
        let units = ab(false);
        let t = simulate_boot(&units, &empty(), &BTreeMap::new(), &phases, Cores::Finite(4)).unwrap();
        assert_eq!(t.unit("B").unwrap().end, phases.userspace_start() + Micros::from_ms(810));
        let blame = blame_report(&t, &units).unwrap();
        assert_eq!(blame["B"], Micros::from_ms(810));
        assert_eq!(blame["A"], Micros::from_ms(800));

        let units = ab(true);
        let t = simulate_boot(&units, &empty(), &BTreeMap::new(), &phases, Cores::Finite(4)).unwrap();
        assert_eq!(blame_report(&t, &units).unwrap()["B"], Micros::from_ms(10));
    }

    #[test]
    fn two_independent_units() {
        let units = vec![
            UnitProfile::new("u1", Micros::from_ms(5), 1.0),
            UnitProfile::new("u2", Micros::from_ms(5), 1.0),
        ];
        let run = |k| {
            simulate_boot(&units, &empty(), &BTreeMap::new(), &NO_PHASES, Cores::Finite(k))
                .unwrap()
                .t_usi()
        };
        assert_eq!(run(2), Micros::from_ms(5));
        assert_eq!(run(1), Micros::from_ms(10));
    }

    #[test]
    fn idle_unit_blame_equals_duration() {
        let units = vec![UnitProfile::new("solo.service", Micros::from_ms(42), 0.3)];
        let t = simulate_boot(&units, &empty(), &BTreeMap::new(), &NO_PHASES, Cores::Finite(1)).unwrap();
        assert_eq!(blame_report(&t, &units).unwrap()["solo.service"], Micros::from_ms(42));
    }

    #[test]
    fn blame_unknown_unit() {
        let t = simulate_boot(&[], &empty(), &BTreeMap::new(), &NO_PHASES, Cores::Finite(1)).unwrap();
        let units = vec![UnitProfile::new("ghost", Micros::ZERO, 0.0)];
        assert!(matches!(
            blame_report(&t, &units),
            Err(SimError::UnitNotInTimeline(_))
        ));
    }

    fn fig8_profiles() -> BTreeMap<String, StageProfile> {
        [("s_i", 2), ("s_j", 2), ("s_k", 2), ("s_m", 3), ("s_n", 4), ("s_l", 1)]
            .into_iter()
            .map(|(id, ms)| {
                (
                    id.to_string(),
                    StageProfile {
                        duration: Micros::from_ms(ms),
                        cpu_demand: 1.0,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn fig8_ordering_and_blocking() {
        let phases = BootPhases::RPI3;
        let t = simulate_boot(&[], &fig8(), &fig8_profiles(), &phases, Cores::Finite(4)).unwrap();
        let release = phases.userspace_start() + phases.systemd_init_delay;
        assert_eq!(t.stage("s_i").unwrap().start, release);
        assert_eq!(t.stage("s_m").unwrap().start, release);
        let l = t.stage("s_l").unwrap();
        assert!(l.start >= t.stage("s_n").unwrap().end);
        assert!(l.start >= t.stage("s_k").unwrap().end);
        // s_k finishes at +6, s_l waits for s_n at +7, so s_k sits blocked.
        let blocked = t.event(EventKind::StageBlocked, "s_k").unwrap();
        assert_eq!(blocked.start, release + Micros::from_ms(6));
        assert_eq!(blocked.end, release + Micros::from_ms(7));
    }

    #[test]
    fn unit_dependency_delays_stage() {
        let m = AppManifest::new("ic_u1", "rpi3")
            .with_stage(StageSpec::new("s_cap", "c"))
            .with_stage(
                StageSpec::new("s_upl", "u")
                    .with_stage_deps(["s_cap"])
                    .with_unit_deps(["network-online.target"]),
            );
        let units = vec![
            UnitProfile::new("networking.service", Micros::from_ms(3500), 0.2),
            UnitProfile::new("network-online.target", Micros::ZERO, 0.0)
                .with_deps(["networking.service"]),
        ];
        let profiles: BTreeMap<String, StageProfile> = [
            ("s_cap".to_string(), StageProfile { duration: Micros::from_ms(1000), cpu_demand: 1.0 }),
            ("s_upl".to_string(), StageProfile { duration: Micros::from_ms(300), cpu_demand: 0.5 }),
        ]
        .into();
        let t = simulate_boot(&units, &m, &profiles, &NO_PHASES, Cores::Finite(4)).unwrap();
        assert_eq!(t.stage("s_upl").unwrap().start, Micros::from_ms(3500));
        let blocked = t.event(EventKind::StageBlocked, "s_cap").unwrap();
        assert_eq!((blocked.start, blocked.end), (Micros::from_ms(1000), Micros::from_ms(3500)));
    }

    #[test]
    fn units_take_priority_over_stages() {
        let m = AppManifest::new("a", "").with_stage(StageSpec::new("aaa", "x"));
        let units = vec![UnitProfile::new("zzz.service", Micros::from_ms(5), 1.0)];
        let profiles: BTreeMap<String, StageProfile> =
            [("aaa".to_string(), StageProfile { duration: Micros::from_ms(5), cpu_demand: 1.0 })].into();
        let t = simulate_boot(&units, &m, &profiles, &NO_PHASES, Cores::Finite(1)).unwrap();
        assert_eq!(t.unit("zzz.service").unwrap().start, Micros::ZERO);
        assert_eq!(t.stage("aaa").unwrap().start, Micros::from_ms(5));
    }

    #[test]
    fn errors_name_the_culprit() {
        let m = AppManifest::new("a", "").with_stage(StageSpec::new("s", "x").with_unit_deps(["nope"]));
        let profiles: BTreeMap<String, StageProfile> =
            [("s".to_string(), StageProfile { duration: Micros::ZERO, cpu_demand: 0.0 })].into();
        let err = simulate_boot(&[], &m, &profiles, &NO_PHASES, Cores::Finite(1)).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");

        let m = AppManifest::new("a", "").with_stage(StageSpec::new("s", "x"));
        let err = simulate_boot(&[], &m, &BTreeMap::new(), &NO_PHASES, Cores::Finite(1)).unwrap_err();
        assert!(matches!(err, SimError::MissingStageProfile(ref s) if s == "s"));

        let units = vec![UnitProfile::new("a", Micros::ZERO, 0.0).with_deps(["missing"])];
        let err = simulate_boot(&units, &empty(), &BTreeMap::new(), &NO_PHASES, Cores::Finite(1)).unwrap_err();
        assert!(err.to_string().contains("missing"));

        let units = vec![
            UnitProfile::new("a", Micros::ZERO, 0.0).with_deps(["b"]),
            UnitProfile::new("b", Micros::ZERO, 0.0).with_deps(["a"]),
        ];
        assert!(matches!(
            simulate_boot(&units, &empty(), &BTreeMap::new(), &NO_PHASES, Cores::Finite(1)),
            Err(SimError::UnitCycle(_))
        ));

        let units = vec![UnitProfile::new("a", Micros::ZERO, 1.5)];
        assert!(matches!(
            simulate_boot(&units, &empty(), &BTreeMap::new(), &NO_PHASES, Cores::Finite(1)),
            Err(SimError::InvalidDemand { .. })
        ));
    }

    #[test]
    fn zero_duration_chain_resolves_instantly() {
        let units = vec![
            UnitProfile::new("a", Micros::ZERO, 1.0),
            UnitProfile::new("b", Micros::ZERO, 1.0).with_deps(["a"]),
            UnitProfile::new("c", Micros::from_ms(3), 1.0).with_deps(["b"]),
        ];
        let t = simulate_boot(&units, &empty(), &BTreeMap::new(), &NO_PHASES, Cores::Finite(1)).unwrap();
        assert_eq!(t.unit("c").unwrap().start, Micros::ZERO);
        assert_eq!(t.t_usi(), Micros::from_ms(3));
    }

    #[test]
    fn gantt_rows_for_ab() {
        let phases = BootPhases::RPI3;
        let t = simulate_boot(&ab(false), &empty(), &BTreeMap::new(), &phases, Cores::Finite(4)).unwrap();
        let csv = gantt_csv(&export_gantt(&t));
        assert_eq!(
            csv,
            "task,kind,start_ms,end_ms\n\
             bootloader,phase,0,3650\n\
             kernel,phase,3650,6500\n\
             A,unit,6500,7300\n\
             B,unit,7300,7310\n"
        );
    }

    #[test]
    fn empty_timeline_gantt_is_header_only() {
        let t = Timeline {
            events: vec![],
            cores: Cores::Finite(1),
            phases: NO_PHASES,
        };
        assert_eq!(gantt_csv(&export_gantt(&t)), "task,kind,start_ms,end_ms\n");
    }

    #[test]
    fn unit_profile_json() {
        let text = r#"[{"unit_name":"A","duration_ms":800,"unit_deps":[],"cpu_demand":1.0,"ordered_after_deps":true},
                       {"unit_name":"B","duration_ms":10,"unit_deps":["A"],"cpu_demand":1.0,"ordered_after_deps":false},
                       {"unit_name":"C","duration_ms":0.5,"cpu_demand":0.25}]"#;
        let units = units_from_json(text).unwrap();
        assert!(!units[1].ordered_after_deps);
        assert!(units[2].ordered_after_deps);
        assert_eq!(units[2].duration, Micros(500));
    }
}
