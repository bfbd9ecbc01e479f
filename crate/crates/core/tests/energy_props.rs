use pallex_core::energy::{
    detect_marker, integrate_power, lifetime, segment_phases, synthesize_power, BitPattern,
    DigitalTrace, LifetimeParams, PowerModel, PowerSample, PowerTrace,
};
use pallex_core::graph::AppManifest;
use pallex_core::sim::{simulate_boot, BootPhases, Cores, UnitProfile};
use pallex_core::Micros;
use proptest::prelude::*;

fn trace() -> impl Strategy<Value = PowerTrace> {
    proptest::collection::vec((1u64..5_000, 0.0f64..3000.0), 1..400).prop_map(|steps| {
        let mut t = 0;
        let samples = steps
            .into_iter()
            .map(|(gap, p)| {
                t += gap;
                PowerSample { t_us: t, power_mw: p }
            })
            .collect();
        PowerTrace::new(samples).unwrap()
    })
}

fn max_power(t: &PowerTrace) -> f64 {
    t.samples().iter().map(|s| s.power_mw).fold(0.0, f64::max)
}

fn max_gap(t: &PowerTrace) -> u64 {
    t.samples().windows(2).map(|w| w[1].t_us - w[0].t_us).max().unwrap_or(0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn integration_is_linear(t in trace(), alpha in 0.0f64..10.0) {
        let e = integrate_power(&t, None).unwrap();
        let scaled = integrate_power(&t.scaled(alpha).unwrap(), None).unwrap();
        prop_assert!((scaled - alpha * e).abs() <= 1e-9 * (1.0 + alpha * e.abs()));
    }

    #[test]
    fn segments_add_up(t in trace(), cuts in proptest::collection::vec(any::<prop::sample::Index>(), 0..6)) {
        let (first, last) = t.span().unwrap();
        let mut b: Vec<u64> = cuts.iter().map(|c| first + c.index((last - first + 1) as usize) as u64).collect();
        b.sort_unstable();
        b.dedup();
        let total = integrate_power(&t, None).unwrap();
        let sum: f64 = segment_phases(&t, &b).unwrap().iter().map(|s| s.energy_j).sum();
        let one_interval = max_power(&t) * max_gap(&t) as f64 * 1e-9;
        prop_assert!((sum - total).abs() <= one_interval + 1e-12, "{} vs {}", sum, total);
    }

    #[test]
    fn streaming_and_windowed_agree(t in trace()) {
        let mut acc = pallex_core::energy::EnergyAccumulator::new();
        for s in t.samples() {
            acc.push(*s);
        }
        let whole = integrate_power(&t, None).unwrap();
        prop_assert!((acc.joules() - whole).abs() <= 1e-12 * (1.0 + whole));
    }

    #[test]
    fn too_few_transitions_never_match(
        (pattern, start, runs) in "[01]{2,10}"
            .prop_filter("needs a level change", |p| p.contains('0') && p.contains('1'))
            .prop_flat_map(|p| {
                let changes = p.as_bytes().windows(2).filter(|w| w[0] != w[1]).count();
                (Just(p), any::<bool>(), proptest::collection::vec(1usize..80, 1..=changes))
            }),
        period_samples in 2u64..12,
    ) {
        let pattern: BitPattern = pattern.parse().unwrap();
        let mut levels = Vec::new();
        let mut level = start;
        for run in runs {
            levels.extend(std::iter::repeat_n(level, run));
            level = !level;
        }
        let d = DigitalTrace::new(
            levels.iter().enumerate().map(|(i, &l)| (i as u64 * 1000, l)).collect(),
            1000.0,
        )
        .unwrap();
        prop_assert!(d.transitions() < pattern.transitions());
        prop_assert_eq!(detect_marker(&d, &pattern, period_samples * 1000).unwrap(), None);
    }

    #[test]
    fn clean_marker_is_found_where_sent(
        pattern in "1[01]{1,9}",
        lead in 1usize..300,
        period_samples in 2u64..12,
    ) {
        let pattern: BitPattern = pattern.parse().unwrap();
        let mut levels = vec![false; lead];
        for &b in pattern.bits() {
            levels.extend(std::iter::repeat_n(b, period_samples as usize));
        }
        levels.extend(std::iter::repeat_n(false, 50));
        let d = DigitalTrace::new(
            levels.iter().enumerate().map(|(i, &l)| (i as u64 * 1000, l)).collect(),
            1000.0,
        )
        .unwrap();
        prop_assert_eq!(
            detect_marker(&d, &pattern, period_samples * 1000).unwrap(),
            Some(lead as u64 * 1000)
        );
    }

    #[test]
    fn lifetime_identity(
        mah in 1.0f64..20_000.0,
        volt in 0.5f64..24.0,
        parts in proptest::collection::vec(0.0f64..50.0, 4),
        n in 1.0f64..120.0,
    ) {
        prop_assume!(parts.iter().sum::<f64>() > 0.0);
        let p = LifetimeParams {
            battery_capacity_mah: mah,
            battery_voltage_v: volt,
            e_btl_j: parts[0],
            e_knl_j: parts[1],
            e_user_j: parts[2],
            e_sdn_j: parts[3],
            cycles_per_hour: n,
        };
        let h = lifetime(&p).unwrap();
        let e_bat = 3600.0 * mah / 1000.0 * volt;
        prop_assert!((h * p.cycle_energy_j() * n - e_bat).abs() <= 1e-12 * e_bat);
        let halved = LifetimeParams {
            e_btl_j: parts[0] / 2.0,
            e_knl_j: parts[1] / 2.0,
            e_user_j: parts[2] / 2.0,
            e_sdn_j: parts[3] / 2.0,
            ..p
        };
        prop_assert!((lifetime(&halved).unwrap() - 2.0 * h).abs() <= 1e-12 * h);
    }

    #[test]
    fn synthesized_energy_matches_event_sum(
        units in proptest::collection::vec((0u64..400_000, 0u32..=4), 1..7),
        k in 1u32..=3,
        rate in prop_oneof![Just(1000.0), Just(2000.0), Just(1500.0), Just(333.0)],
        p_base in 0.0f64..800.0,
        p_core in 0.0f64..2000.0,
    ) {
        let profiles: Vec<UnitProfile> = units
            .iter()
            .enumerate()
            .map(|(i, &(us, q))| {
                let u = UnitProfile::new(format!("u{i}"), Micros::from_us(us), q as f64 / 4.0);
                if i > 0 && i % 2 == 0 { u.with_deps([format!("u{}", i - 1)]) } else { u }
            })
            .collect();
        let t = simulate_boot(&profiles, &AppManifest::new("p", ""), &Default::default(), &BootPhases::RPI3, Cores::Finite(k)).unwrap();
        let model = PowerModel { p_base_mw: p_base, p_core_mw: p_core };
        let trace = synthesize_power(&t, model, rate).unwrap();
        prop_assert_eq!(trace.span(), Some((0, t.total().as_us())));

        // closed form: baseline over the whole cycle plus demand-weighted busy time
        let busy: f64 = t
            .events
            .iter()
            .filter(|e| e.kind.is_compute())
            .map(|e| e.cpu_demand * (e.end - e.start).as_us() as f64)
            .sum();
        let closed = (p_base * t.total().as_us() as f64 + p_core * busy) * 1e-9;
        let demand_sum: f64 = t.events.iter().filter(|e| e.kind.is_compute()).map(|e| e.cpu_demand).sum();
        let dt = 1e6 / rate;
        let tol = dt * p_core * demand_sum * 1e-9 + 1e-9;
        let e = integrate_power(&trace, None).unwrap();
        prop_assert!((e - closed).abs() <= tol, "{} vs {} (tol {})", e, closed, tol);
    }
}
