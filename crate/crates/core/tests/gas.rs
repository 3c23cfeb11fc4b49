use knudsen::billiard::Side;
use knudsen::gas::{
    arrival_rate, bin_snapshot_counts, exit_counts, run_ensemble, run_event_driven, steady_state_from_ledger,
    InjectionConfig,
};
use knudsen::geometry::{build_tube, make_finite, TubeSpec};
use knudsen::stats::{mean_stderr, sum};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn little_identity_is_exact(seed in any::<u64>(), n in 1usize..400, lambda in 0.1f64..10.0, h in 4u32..40) {
        let tube = build_tube(TubeSpec::reference(), seed).unwrap();
        let ftube = make_finite(&tube, h as f64).unwrap();
        let ledger = run_ensemble(&ftube, Side::Left, n, 5, seed).unwrap();
        let s = steady_state_from_ledger(&ledger, lambda).unwrap();
        prop_assert!((s.q - s.arrival_rate * s.mean_lifetime).abs() <= 1e-12 * s.q);
        prop_assert!((sum(s.mean_counts.iter().copied()) - s.q).abs() <= 1e-9 * s.q);
        prop_assert_eq!(ledger.records.len(), n);
    }
}

#[test]
fn every_particle_exits_once() {
    let tube = build_tube(TubeSpec::reference(), 42).unwrap();
    let ftube = make_finite(&tube, 20.0).unwrap();
    let ledger = run_ensemble(&ftube, Side::Left, 20_000, 10, 1).unwrap();
    let (left, right) = exit_counts(&ledger);
    assert_eq!(left + right, ledger.n_injected);
    let s = steady_state_from_ledger(&ledger, 1.0).unwrap();
    let rate = arrival_rate(1.0, &ftube, Side::Left);
    assert!((s.current + s.current_left - rate).abs() < 1e-12 * rate);
}

#[test]
fn event_driven_agrees_with_ensemble() {
    let tube = build_tube(TubeSpec::reference(), 42).unwrap();
    let h = 16.0;
    let ftube = make_finite(&tube, h).unwrap();
    let m = 4;
    let ledger = run_ensemble(&ftube, Side::Left, 100_000, m, 2).unwrap();
    let ens = steady_state_from_ledger(&ledger, 1.0).unwrap();
    let rate = arrival_rate(1.0, &ftube, Side::Left);
    let config = InjectionConfig {
        lambda_left: 1.0,
        lambda_right: 0.0,
    };
    let warmup = 2.0 * h * h;
    let times: Vec<f64> = (0..2000).map(|k| warmup + 20.0 * h * k as f64).collect();
    let snaps = run_event_driven(&ftube, &config, warmup, &times, 3).unwrap();
    let ev = bin_snapshot_counts(&snaps, &ledger.bin_edges);
    for b in 0..m {
        let occ: Vec<f64> = ledger.records.iter().map(|r| rate * r.bin_occupation[b]).collect();
        let (_, se_ens) = mean_stderr(&occ);
        let counts: Vec<f64> = snaps
            .iter()
            .map(|s| {
                s.particles
                    .iter()
                    .filter(|(p, _)| p.x >= ledger.bin_edges[b] && p.x < ledger.bin_edges[b + 1])
                    .count() as f64
            })
            .collect();
        let (_, se_ev) = mean_stderr(&counts);
        let z = (ev[b] - ens.mean_counts[b]).abs() / se_ens.hypot(se_ev);
        assert!(z < 3.0, "bin {b}: event {} vs ensemble {} (z = {z})", ev[b], ens.mean_counts[b]);
    }
    for s in &snaps {
        assert!(s.particles.iter().all(|(p, _)| ftube.inside(*p)));
    }
}
