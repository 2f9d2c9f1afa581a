use proptest::prelude::*;
use rand::Rng;

use gbart_core::data::Matrix;
use gbart_core::harness::{ExperimentConfig, TruthSpec};
use gbart_core::likelihoods::{Likelihood, LinkFunction};
use gbart_core::metrics::pointwise_closed_form;
use gbart_core::rng::seeded;
use gbart_core::tree::{log_prior_tree, sample_tree_chipman, TreePriorSpec};
use gbart_core::truth::{step_complexity, TruthFunction};

fn likelihood(which: u8) -> Likelihood {
    match which % 4 {
        0 => Likelihood::gaussian(0.7).unwrap(),
        1 => Likelihood::poisson(LinkFunction::Softplus).unwrap(),
        2 => Likelihood::poisson(LinkFunction::Exp).unwrap(),
        _ => Likelihood::multinomial(3).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn divergences_are_ordered_and_bounded(which in 0u8..4, a in prop::collection::vec(-4.0..4.0f64, 3), b in prop::collection::vec(-4.0..4.0f64, 3)) {
        let lik = likelihood(which);
        let d = lik.natural_dim();
        let (a, b) = (&a[..d], &b[..d]);
        let p = pointwise_closed_form(&lik, a, b);
        prop_assert!((0.0..=1.0).contains(&p.h));
        prop_assert!(p.kl >= -1e-12);
        prop_assert!(p.h * p.h <= p.kl + 1e-12);
        prop_assert!(p.v >= -1e-12);
        let same = pointwise_closed_form(&lik, a, a);
        prop_assert!(same.h.abs() < 1e-7 && same.kl.abs() < 1e-12);
    }

    #[test]
    fn sampled_trees_have_nonempty_cells(seed in any::<u64>(), n in 1usize..60, q in 1usize..4, alpha in 0.05..0.49f64) {
        let mut rng = seeded(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..q).map(|_| rng.random::<f64>()).collect()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let spec = TreePriorSpec::chipman(alpha);
        let tree = sample_tree_chipman(&spec, &x, &mut rng).unwrap();
        let mut counts = vec![0usize; tree.leaf_count()];
        for r in &rows {
            counts[tree.leaf_index(r)] += 1;
        }
        prop_assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        prop_assert!(log_prior_tree(&spec, &tree, &x).unwrap().is_finite());
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), reps in 1usize..20, grid in prop::collection::btree_set(10usize..5000, 1..6), k0 in 1usize..8, amp in 0.1..3.0f64) {
        let cfg = ExperimentConfig {
            seed,
            replicates: reps,
            n_grid: grid.into_iter().collect(),
            truth: TruthSpec::Step { k0, amplitude: amp },
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::parse(&cfg.to_config_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn random_steps_have_their_requested_complexity(seed in any::<u64>(), q in 1usize..4, k0 in 1usize..7) {
        let mut rng = seeded(seed);
        let truth = TruthFunction::random_step(q, k0, 1.0, &mut rng).unwrap();
        prop_assert_eq!(step_complexity(&truth).unwrap(), k0);
    }
}
