use cloudgp::active_set::{active_models, WindowSpec};
use cloudgp::gp::{KernelHyper, TrainingPair};
use cloudgp::tree::{LeafSet, LogGpTree};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grown_tree(seed: u64, n: usize, capacity: usize) -> LogGpTree {
    let hyper = KernelHyper::new(1.0, vec![1.0, 3.0], 0.05).unwrap();
    let mut tree = LogGpTree::new(hyper, capacity, 0.1, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for i in 0..n {
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
        let y = 1.0 - x[0].sin() + 1.0 / (1.0 + (-x[1]).exp());
        tree.insert(TrainingPair::new(x, y, i as f64)).unwrap();
    }
    tree
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weights_sum_to_one_and_restricted_equals_aggregate(
        seed in 0u64..1000,
        n in 1usize..400,
        queries in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 1..20),
    ) {
        let tree = grown_tree(seed, n, 20);
        let all = tree.leaf_ids();
        prop_assert_eq!(tree.total_pairs(), n);
        for q in &queries {
            let w = tree.weights(q);
            let s: f64 = w.iter().map(|(_, w)| w).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|(id, w)| *w > 0.0 && tree.is_leaf(*id)));

            let r = tree.restricted_predict(q, &all);
            prop_assert_eq!(r.missed, 0);
            prop_assert_eq!(r.prediction, tree.aggregate_predict(q));

            let active: LeafSet = w.iter().map(|(id, _)| *id).collect();
            prop_assert_eq!(tree.restricted_predict(q, &active).prediction, r.prediction);
        }
    }

    #[test]
    fn json_round_trip_preserves_predictions(seed in 0u64..1000, n in 1usize..200) {
        let tree = grown_tree(seed, n, 15);
        let back = LogGpTree::from_json(&tree.to_json().unwrap()).unwrap();
        for q in [[0.0, 0.0], [0.7, -1.2], [-1.4, 1.1]] {
            prop_assert_eq!(back.aggregate_predict(&q), tree.aggregate_predict(&q));
        }
    }
}

#[test]
fn routing_frequency_matches_weights() {
    let hyper = KernelHyper::new(1.0, vec![0.5], 0.1).unwrap();
    let mut tree = LogGpTree::new(hyper, 40, 0.5, 5).unwrap();
    for i in 0..40 {
        let x = -1.0 + 2.0 * i as f64 / 39.0;
        tree.insert(TrainingPair::new(vec![x], x, i as f64)).unwrap();
    }
    assert_eq!(tree.leaf_count(), 2);
    let x = [0.1];
    let w = tree.weights(&x);
    assert_eq!(w.len(), 2, "query must sit in the overlap band");

    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut hits = 0usize;
    for i in 0..draws {
        let mut t = tree.clone();
        let leaf = t.assign_and_update(TrainingPair::new(x.to_vec(), 0.0, 100.0 + i as f64), &mut rng).unwrap();
        if leaf == w[0].0 {
            hits += 1;
        }
    }
    let freq = hits as f64 / draws as f64;
    assert!((freq - w[0].1).abs() < 0.02, "frequency {freq} vs weight {}", w[0].1);
}

#[test]
fn active_models_agree_with_dense_grid_oracle() {
    let tree = grown_tree(3, 600, 40);
    assert!(tree.leaf_count() > 8);
    let center = |t: f64| vec![t.cos(), 0.8 * t.sin()];
    let window = WindowSpec::new(0.0, 1.0, 0.25, 4000, 0.01).unwrap();
    let theta = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let sampled = active_models(&tree, &window, 0.0, center, |_| theta, &mut rng);

    let xi = 2.0 * window.zeta + theta;
    let mut oracle = LeafSet::new();
    let h = xi / 40.0;
    for j in 0..=window.steps() {
        let c = center(j as f64 * window.dt);
        for a in -40..=40 {
            for b in -40..=40 {
                let p = [c[0] + a as f64 * h, c[1] + b as f64 * h];
                if (p[0] - c[0]).hypot(p[1] - c[1]) <= xi {
                    for (id, _) in tree.weights(&p) {
                        oracle.insert(id);
                    }
                }
            }
        }
    }
    assert!(!oracle.is_empty());
    assert_eq!(sampled, oracle);

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let small_window = WindowSpec { samples: 50, ..window };
    let subset = active_models(&tree, &small_window, 0.0, center, |_| theta, &mut rng);
    assert!(subset.is_subset(&sampled));
}
