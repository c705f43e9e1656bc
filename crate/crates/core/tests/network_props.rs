use cloudgp::experiment::{run_experiment, ExperimentConfig, NetworkSection};
use cloudgp::network::{stopping_index, transfer_time, Channel, MbarTracker};
use proptest::prelude::*;

proptest! {
    #[test]
    fn mbar_never_exceeds_cap(q in 1usize..6, cap in 1usize..700, sizes in prop::collection::vec(0usize..2000, 0..40)) {
        let mut t = MbarTracker::new(q, cap);
        for s in &sizes {
            t.push(*s);
            prop_assert!(t.value() <= cap);
        }
        if sizes.len() > q {
            let growth = (q..sizes.len()).map(|j| sizes[j].saturating_sub(sizes[j - q])).max().unwrap();
            prop_assert_eq!(t.value(), growth.min(cap));
        }
    }

    #[test]
    fn stopping_index_is_first_exceedance(
        q in 1usize..6,
        cap in 100usize..5000,
        mbar in 0usize..600,
        sizes in prop::collection::vec(0usize..3000, 0..30),
    ) {
        let thr = cap as f64 / 2.0 - mbar as f64;
        match stopping_index(&sizes, q, cap, mbar) {
            Some(iota) => {
                let j = iota - q;
                prop_assert!(sizes[j] as f64 > thr);
                prop_assert!(sizes[..j].iter().all(|&s| s as f64 <= thr));
            }
            None => prop_assert!(sizes.iter().all(|&s| s as f64 <= thr)),
        }
    }

    #[test]
    fn transfer_time_is_affine(size in 0usize..100_000, b in 1.0f64..1e5, d in 0.0f64..5.0) {
        let c = Channel::new(b, d).unwrap();
        let t = transfer_time(size, &c);
        prop_assert!((t - (size as f64 / b + d)).abs() <= 1e-12 * (1.0 + t));
        prop_assert!(transfer_time(size + 1, &c) > t);
    }
}

#[test]
fn tight_channels_never_fault_or_run_late() {
    for (bandwidth, delay) in [(1500.0, 0.1), (2400.0, 0.3), (5000.0, 0.5)] {
        let cfg = ExperimentConfig {
            duration: 36.0,
            audit: true,
            network: NetworkSection {
                bandwidth,
                delay,
                ..Default::default()
            },
            ..ExperimentConfig::default()
        };
        let rec = run_experiment(&cfg).unwrap();
        let s = &rec.summary;
        assert_eq!(s.overflow_faults, 0, "B={bandwidth} T_d={delay}");
        assert_eq!(s.late_transfers, 0, "B={bandwidth} T_d={delay}");
        assert!(s.max_memory <= cfg.network.memory_cap);
        assert!(rec.rows.iter().all(|r| r.mem <= cfg.network.memory_cap));
    }
}
