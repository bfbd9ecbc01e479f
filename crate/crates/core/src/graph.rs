//! Application manifests: stages, their dependency sets, and the ordering
//! and timing analyses built on top of them.
//!
//! A stage has two dependency sets. `stage_deps` names other stages of the
//! same application whose output it consumes; `unit_deps` names init-system
//! units that must be active before it may start. A stage with both sets
//! empty is startable as soon as userspace initialization begins.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Micros;

/// One schedulable fragment of a user application.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub id: String,
    pub command: String,
    #[serde(default)]
    pub stage_deps: BTreeSet<String>,
    #[serde(default)]
    pub unit_deps: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_hint: Option<u64>,
}

impl StageSpec {
    pub fn new(id: impl Into<String>, command: impl Into<String>) -> Self {
        StageSpec {
            id: id.into(),
            command: command.into(),
            stage_deps: BTreeSet::new(),
            unit_deps: BTreeSet::new(),
            payload_hint: None,
        }
    }

    pub fn with_stage_deps<I, S>(mut self, deps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.stage_deps.extend(deps.into_iter().map(Into::into));
        self
    }

    pub fn with_unit_deps<I, S>(mut self, deps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.unit_deps.extend(deps.into_iter().map(Into::into));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppManifest {
    pub app_id: String,
    #[serde(default)]
    pub target_platform: String,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
}

impl AppManifest {
    pub fn new(app_id: impl Into<String>, target_platform: impl Into<String>) -> Self {
        AppManifest {
            app_id: app_id.into(),
            target_platform: target_platform.into(),
            stages: Vec::new(),
        }
    }

    pub fn with_stage(mut self, stage: StageSpec) -> Self {
        self.stages.push(stage);
        self
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization is infallible")
    }

    pub fn stage(&self, id: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.id == id)
    }

    /// Stages that list `id` in their `stage_deps`, sorted by id.
    pub fn successors(&self, id: &str) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .stages
            .iter()
            .filter(|s| s.stage_deps.contains(id))
            .map(|s| s.id.as_str())
            .collect();
        out.sort_unstable();
        out
    }
}

/// A single well-formedness problem found in a manifest.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyStageId { index: usize },
    DuplicateStageId { stage: String },
    SelfDependency { stage: String },
    UnknownStageDependency { stage: String, dependency: String },
    /// The stages of one strongly connected component of the stage graph.
    Cycle { stages: Vec<String> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyStageId { index } => write!(f, "stage #{index} has an empty id"),
            Violation::DuplicateStageId { stage } => write!(f, "duplicate stage id {stage}"),
            Violation::SelfDependency { stage } => {
                write!(f, "stage {stage} lists itself as a stage dependency")
            }
            Violation::UnknownStageDependency { stage, dependency } => {
                write!(f, "stage {stage} depends on unknown stage {dependency}")
            }
            Violation::Cycle { stages } => write!(f, "cycle {{{}}}", stages.join(",")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// True if any dependency cycle was found, self-dependencies included.
    pub fn has_cycle(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, Violation::Cycle { .. } | Violation::SelfDependency { .. }))
    }

    pub fn cycles(&self) -> impl Iterator<Item = &[String]> {
        self.violations.iter().filter_map(|v| match v {
            Violation::Cycle { stages } => Some(stages.as_slice()),
            _ => None,
        })
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid manifest: {0}")]
    Invalid(ValidationReport),
    #[error("stage {stage} depends on unit {unit}, which has no ready time")]
    MissingUnitReady { stage: String, unit: String },
    #[error("no duration given for stage {0}")]
    MissingDuration(String),
}

/// Checks every manifest invariant and reports all violations found.
///
/// Each strongly connected component with more than one stage is reported
/// once as a cycle, so independent cycles are all listed.
pub fn validate_manifest(m: &AppManifest) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    let mut dup = BTreeSet::new();

    for (index, stage) in m.stages.iter().enumerate() {
        if stage.id.is_empty() {
            violations.push(Violation::EmptyStageId { index });
        } else if !seen.insert(stage.id.as_str()) {
            dup.insert(stage.id.clone());
        }
    }
    violations.extend(dup.into_iter().map(|stage| Violation::DuplicateStageId { stage }));

    for stage in &m.stages {
        if stage.stage_deps.contains(&stage.id) {
            violations.push(Violation::SelfDependency {
                stage: stage.id.clone(),
            });
        }
        for dep in &stage.stage_deps {
            if !seen.contains(dep.as_str()) {
                violations.push(Violation::UnknownStageDependency {
                    stage: stage.id.clone(),
                    dependency: dep.clone(),
                });
            }
        }
    }

    let mut edges: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for stage in &m.stages {
        let out = edges.entry(stage.id.as_str()).or_default();
        for dep in &stage.stage_deps {
            if dep != &stage.id && seen.contains(dep.as_str()) {
                out.insert(dep.as_str());
            }
        }
    }
    for component in cyclic_components(&edges) {
        violations.push(Violation::Cycle {
            stages: component.into_iter().map(str::to_owned).collect(),
        });
    }

    ValidationReport { violations }
}

/// Strongly connected components with two or more members, each sorted,
/// listed in order of their smallest member. Self-loops are ignored.
pub(crate) fn cyclic_components<'a>(
    edges: &BTreeMap<&'a str, BTreeSet<&'a str>>,
) -> Vec<Vec<&'a str>> {
    struct Tarjan<'a, 'g> {
        edges: &'g BTreeMap<&'a str, BTreeSet<&'a str>>,
        index: BTreeMap<&'a str, usize>,
        low: BTreeMap<&'a str, usize>,
        on_stack: BTreeSet<&'a str>,
        stack: Vec<&'a str>,
        next: usize,
        out: Vec<Vec<&'a str>>,
    }

    impl<'a> Tarjan<'a, '_> {
        fn visit(&mut self, v: &'a str) {
            self.index.insert(v, self.next);
            self.low.insert(v, self.next);
            self.next += 1;
            self.stack.push(v);
            self.on_stack.insert(v);

            let empty = BTreeSet::new();
            let succ = self.edges.get(v).unwrap_or(&empty);
            for &w in succ {
                if w == v {
                    continue;
                }
                if !self.index.contains_key(w) {
                    self.visit(w);
                    let lw = self.low[w];
                    let lv = self.low.get_mut(v).unwrap();
                    *lv = (*lv).min(lw);
                } else if self.on_stack.contains(w) {
                    let iw = self.index[w];
                    let lv = self.low.get_mut(v).unwrap();
                    *lv = (*lv).min(iw);
                }
            }

            if self.low[v] == self.index[v] {
                let mut component = Vec::new();
                loop {
                    let w = self.stack.pop().unwrap();
                    self.on_stack.remove(w);
                    component.push(w);
                    if w == v {
                        break;
                    }
                }
                if component.len() > 1 {
                    component.sort_unstable();
                    self.out.push(component);
                }
            }
        }
    }

    let mut t = Tarjan {
        edges,
        index: BTreeMap::new(),
        low: BTreeMap::new(),
        on_stack: BTreeSet::new(),
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for &v in edges.keys() {
        if !t.index.contains_key(v) {
            t.visit(v);
        }
    }
    t.out.sort();
    t.out
}

/// Linearizes the stages so that each appears after all of its stage
/// dependencies. Among stages that are ready at the same point, the
/// lexicographically smallest id goes first.
pub fn topo_order(m: &AppManifest) -> Result<Vec<String>, GraphError> {
    let report = validate_manifest(m);
    if !report.is_ok() {
        return Err(GraphError::Invalid(report));
    }

    let mut pending: BTreeMap<&str, usize> = m
        .stages
        .iter()
        .map(|s| (s.id.as_str(), s.stage_deps.len()))
        .collect();
    let mut ready: BTreeSet<&str> = pending
        .iter()
        .filter(|(_, &n)| n == 0)
        .map(|(&id, _)| id)
        .collect();
    let mut order = Vec::with_capacity(m.stages.len());

    while let Some(id) = ready.pop_first() {
        order.push(id.to_owned());
        for succ in m.successors(id) {
            let n = pending.get_mut(succ).unwrap();
            *n -= 1;
            if *n == 0 {
                ready.insert(succ);
            }
        }
    }
    debug_assert_eq!(order.len(), m.stages.len());
    Ok(order)
}

/// Earliest start and finish of one stage, with unlimited processors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageWindow {
    pub start: Micros,
    pub finish: Micros,
}

/// Computes when each stage could start and finish if every stage had a
/// processor to itself.
///
/// A stage starts at the latest of its units' ready times and its
/// predecessor stages' finish times (zero if it has neither).
pub fn earliest_start(
    m: &AppManifest,
    unit_ready: &BTreeMap<String, Micros>,
    stage_durations: &BTreeMap<String, Micros>,
) -> Result<BTreeMap<String, StageWindow>, GraphError> {
    let order = topo_order(m)?;
    let mut out: BTreeMap<String, StageWindow> = BTreeMap::new();

    for id in order {
        let stage = m.stage(&id).expect("topo order only yields manifest stages");
        let duration = *stage_durations
            .get(&id)
            .ok_or_else(|| GraphError::MissingDuration(id.clone()))?;

        let mut start = Micros::ZERO;
        for unit in &stage.unit_deps {
            let ready = unit_ready.get(unit).ok_or_else(|| GraphError::MissingUnitReady {
                stage: id.clone(),
                unit: unit.clone(),
            })?;
            start = start.max(*ready);
        }
        for dep in &stage.stage_deps {
            start = start.max(out[dep].finish);
        }
        out.insert(
            id,
            StageWindow {
                start,
                finish: start + duration,
            },
        );
    }
    Ok(out)
}

/// The largest earliest-finish time, i.e. the critical path length.
pub fn critical_path_length(windows: &BTreeMap<String, StageWindow>) -> Micros {
    windows
        .values()
        .map(|w| w.finish)
        .max()
        .unwrap_or(Micros::ZERO)
}
