use std::collections::BTreeSet;

use pallex_core::graph::{AppManifest, StageSpec};
use pallex_core::sim::{
    blame_report, simulate_boot, BootPhases, Cores, EventKind, StageProfile, Timeline, UnitProfile,
};
use pallex_core::Micros;
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Instance {
    durations: Vec<u64>,
    demands: Vec<f64>,
    preds: Vec<BTreeSet<usize>>,
    ordered: Vec<bool>,
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=8).prop_flat_map(|n| {
        (
            proptest::collection::vec(0u64..40, n),
            proptest::collection::vec(0u32..=4, n),
            proptest::collection::vec(proptest::bool::weighted(0.3), n * n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(durations, quarters, bits, ordered)| Instance {
                durations,
                demands: quarters.iter().map(|&q| q as f64 / 4.0).collect(),
                preds: (0..n)
                    .map(|j| (0..j).filter(|&i| bits[i * n + j]).collect())
                    .collect(),
                ordered,
            })
    })
}

fn cores() -> impl Strategy<Value = Cores> {
    prop_oneof![
        Just(Cores::Finite(1)),
        Just(Cores::Finite(2)),
        Just(Cores::Finite(4)),
        Just(Cores::Unbounded)
    ]
}

fn name(i: usize) -> String {
    // reverse the index so name order differs from dependency order
    format!("u{}", 9 - i)
}

impl Instance {
    fn units(&self) -> Vec<UnitProfile> {
        (0..self.durations.len())
            .map(|i| {
                let mut u = UnitProfile::new(name(i), Micros::from_ms(self.durations[i]), self.demands[i])
                    .with_deps(self.preds[i].iter().map(|&p| name(p)));
                if !self.ordered[i] {
                    u = u.unordered();
                }
                u
            })
            .collect()
    }

    fn run(&self, cores: Cores) -> Timeline {
        simulate_boot(
            &self.units(),
            &AppManifest::new("p", ""),
            &Default::default(),
            &BootPhases::RPI3,
            cores,
        )
        .unwrap()
    }

    /// Longest chain of durations ending at each unit.
    fn critical_path_ms(&self) -> u64 {
        let mut best = 0;
        for v in 0..self.durations.len() {
            let mut stack = vec![(v, self.durations[v])];
            while let Some((x, acc)) = stack.pop() {
                best = best.max(acc);
                for &p in &self.preds[x] {
                    stack.push((p, acc + self.durations[p]));
                }
            }
        }
        best
    }
}

fn check_capacity(t: &Timeline, k: Cores) -> Result<(), TestCaseError> {
    let Cores::Finite(k) = k else { return Ok(()) };
    let compute: Vec<_> = t
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Unit || e.kind == EventKind::StageCompute)
        .collect();
    for probe in &compute {
        let at = probe.start;
        let load: f64 = compute
            .iter()
            .filter(|e| e.start <= at && at < e.end)
            .map(|e| e.cpu_demand)
            .sum();
        prop_assert!(load <= k as f64 + 1e-9, "load {} > {} at {}", load, k, at);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn schedule_respects_capacity_and_dependencies(inst in instance(), k in cores()) {
        let t = inst.run(k);
        check_capacity(&t, k)?;
        let us = t.userspace_start();
        for (j, preds) in inst.preds.iter().enumerate() {
            let e = t.unit(&name(j)).unwrap();
            prop_assert!(e.start >= us);
            prop_assert_eq!(e.end, e.start + Micros::from_ms(inst.durations[j]));
            for &i in preds {
                prop_assert!(e.start >= t.unit(&name(i)).unwrap().end);
            }
        }
    }

    #[test]
    fn schedule_is_deterministic(inst in instance(), k in cores()) {
        prop_assert_eq!(inst.run(k), inst.run(k));
    }

    #[test]
    fn unbounded_makespan_is_the_critical_path(inst in instance()) {
        let t = inst.run(Cores::Unbounded);
        prop_assert_eq!(t.t_usi(), Micros::from_ms(inst.critical_path_ms()));
    }

    #[test]
    fn unbounded_never_slower_than_finite(inst in instance(), k in 1u32..=4) {
        prop_assert!(inst.run(Cores::Unbounded).total() <= inst.run(Cores::Finite(k)).total());
    }

    #[test]
    fn blame_covers_execution_time(inst in instance(), k in cores()) {
        let units = inst.units();
        let t = inst.run(k);
        let blame = blame_report(&t, &units).unwrap();
        for (i, u) in units.iter().enumerate() {
            prop_assert!(blame[&u.unit_name] >= Micros::from_ms(inst.durations[i]));
            if !u.ordered_after_deps {
                prop_assert_eq!(blame[&u.unit_name], t.unit(&u.unit_name).unwrap().end - t.userspace_start());
            }
        }
    }

    #[test]
    fn stages_wait_for_units_and_release(inst in instance(), k in cores(), dur in 0u64..30, pick in any::<prop::sample::Index>()) {
        let dep = name(pick.index(inst.durations.len()));
        let m = AppManifest::new("p", "")
            .with_stage(StageSpec::new("first", "x").with_unit_deps([dep.clone()]))
            .with_stage(StageSpec::new("second", "x").with_stage_deps(["first"]));
        let profiles = [("first", dur), ("second", 3)]
            .into_iter()
            .map(|(s, d)| (s.to_string(), StageProfile { duration: Micros::from_ms(d), cpu_demand: 1.0 }))
            .collect();
        let t = simulate_boot(&inst.units(), &m, &profiles, &BootPhases::RPI3, k).unwrap();
        check_capacity(&t, k)?;
        let first = t.stage("first").unwrap();
        let second = t.stage("second").unwrap();
        let release = t.userspace_start() + BootPhases::RPI3.systemd_init_delay;
        prop_assert!(first.start >= release);
        prop_assert!(first.start >= t.unit(&dep).unwrap().end);
        prop_assert!(second.start >= first.end);
        if let Some(blocked) = t.event(EventKind::StageBlocked, "first") {
            prop_assert_eq!(blocked.start, first.end);
            prop_assert_eq!(blocked.end, second.start);
            prop_assert!(blocked.end > blocked.start);
        }
    }
}

/// Greedy list scheduling is not guaranteed monotone in the core count.
/// Search a fixed pseudo-random family and report what turns up; the only
/// hard guarantee asserted is that no finite count beats unbounded cores.
#[test]
fn core_count_monotonicity_survey() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let mut anomalies = Vec::new();
    let trials = 2000;
    for trial in 0..trials {
        let n = rng.gen_range(1..=8);
        let inst = Instance {
            durations: (0..n).map(|_| rng.gen_range(0..40)).collect(),
            demands: (0..n).map(|_| rng.gen_range(0..=4) as f64 / 4.0).collect(),
            preds: (0..n)
                .map(|j| (0..j).filter(|_| rng.gen_bool(0.3)).collect())
                .collect(),
            ordered: vec![true; n],
        };
        let unbounded = inst.run(Cores::Unbounded).total();
        let mut prev = None;
        for k in 1..=4 {
            let total = inst.run(Cores::Finite(k)).total();
            assert!(unbounded <= total);
            if let Some((pk, pt)) = prev {
                if total > pt {
                    anomalies.push((trial, pk, pt, k, total));
                }
            }
            prev = Some((k, total));
        }
    }
    println!(
        "core-count monotonicity: {} anomalies in {trials} instances",
        anomalies.len()
    );
    for (trial, pk, pt, k, total) in anomalies.iter().take(5) {
        println!("  instance {trial}: k={pk} -> {pt} ms, k={k} -> {total} ms");
    }
}
