//! Property tests for the exclusion rules and the engines built on them.

mod common;

use classex::inference::{
    exclude_step, recover_step, run_exclusion, BetaSchedule, CachedSource, ExclusionOptions, ExitReason,
    RemainingSet,
};
use classex::model::{ExitOutput, FullOutput, Model};
use classex::tensor::{argmax, Tensor};
use common::{random_input, random_valid_config, simulate, trace_mismatch};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prob() -> impl Strategy<Value = f32> {
    prop_oneof![0.0f32..=1.0, (0u8..=4).prop_map(|k| k as f32 / 4.0)]
}

/// `(probabilities per exit, final logits, betas)` for M classes and N exits.
fn sequence() -> impl Strategy<Value = (Vec<Vec<f32>>, Vec<f32>, Vec<f64>)> {
    (2usize..=10, 1usize..=6).prop_flat_map(|(m, n)| {
        (
            prop::collection::vec(prop::collection::vec(prob(), m), n),
            prop::collection::vec(-3.0f32..3.0, m),
            prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0], n),
        )
    })
}

fn outputs(probs: &[Vec<f32>], final_logits: &[f32]) -> FullOutput {
    FullOutput {
        final_logits: final_logits.to_vec(),
        exits: probs
            .iter()
            .map(|p| ExitOutput {
                exclusion_probs: p.clone(),
                classifier_probs: vec![0.0; p.len()],
            })
            .collect(),
    }
}

fn run(out: &FullOutput, betas: &[f64], restrict: bool) -> classex::inference::InferenceTrace {
    run_exclusion(
        &mut CachedSource::new(out),
        &BetaSchedule::new(betas.to_vec()).unwrap(),
        ExclusionOptions { restrict_final: restrict },
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn exclusion_keeps_the_maximum(p in prop::collection::vec(prob(), 2..12), beta in 0.0f64..=1.0) {
        let full = RemainingSet::full(p.len());
        let (kept, excluded) = exclude_step(&p, &full, beta).unwrap();
        prop_assert!(!kept.is_empty());
        prop_assert!(kept.contains(argmax(&p)));
        prop_assert_eq!(kept.len() + excluded.len(), p.len());
        for j in excluded {
            prop_assert!(!kept.contains(j));
        }
    }

    #[test]
    fn larger_beta_keeps_a_subset(p in prop::collection::vec(prob(), 2..12), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let full = RemainingSet::full(p.len());
        let (small, _) = exclude_step(&p, &full, hi).unwrap();
        let (large, _) = exclude_step(&p, &full, lo).unwrap();
        prop_assert!(small.is_subset_of(&large));
    }

    #[test]
    fn recovery_adds_at_most_the_argmax(p in prop::collection::vec(prob(), 2..12), keep in prop::collection::vec(any::<bool>(), 12)) {
        let m = p.len();
        let classes: Vec<usize> = (0..m).filter(|&j| keep[j]).collect();
        let before = RemainingSet::from_classes(m, &classes).unwrap();
        let (after, recovered) = recover_step(&p, &before);
        prop_assert!(before.is_subset_of(&after));
        prop_assert!(after.len() <= before.len() + 1);
        prop_assert!(after.contains(argmax(&p)));
        prop_assert_eq!(recovered.is_some(), !before.contains(argmax(&p)));
    }

    #[test]
    fn engine_matches_simulator((probs, logits, betas) in sequence(), restrict in any::<bool>()) {
        let t = run(&outputs(&probs, &logits), &betas, restrict);
        let s = simulate(&probs, &logits, &betas, restrict);
        prop_assert_eq!(trace_mismatch(&t, &s), None);
    }

    #[test]
    fn remaining_sets_follow_the_rules((probs, logits, betas) in sequence()) {
        let m = logits.len();
        let t = run(&outputs(&probs, &logits), &betas, true);
        let mut prev: Vec<usize> = (0..m).collect();
        for ev in &t.events {
            prop_assert!(!ev.remaining.is_empty());
            prop_assert!(ev.remaining.contains(&argmax(&ev.probs)));
            prop_assert!(ev.remaining.iter().all(|c| prev.contains(c) || ev.recovered == Some(*c)));
            prop_assert!(ev.remaining.len() <= prev.len() + 1);
            prev = ev.remaining.clone();
        }
        if t.exit_reason == ExitReason::SingleClass {
            prop_assert_eq!(&prev, &vec![t.predicted_class]);
        } else {
            prop_assert_eq!(t.exit_layer, betas.len());
            prop_assert!(prev.contains(&t.predicted_class));
        }
    }

    #[test]
    fn larger_betas_never_exit_later((probs, logits, betas) in sequence(), lift in prop::collection::vec(0.0f64..=1.0, 6)) {
        let out = outputs(&probs, &logits);
        let larger: Vec<f64> = betas.iter().zip(&lift).map(|(b, u)| b + u * (1.0 - b)).collect();
        prop_assert!(run(&out, &larger, true).exit_layer <= run(&out, &betas, true).exit_layer);
    }

    #[test]
    fn zero_betas_reproduce_the_static_network(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 2 + (seed % 9) as usize;
        let n = 1 + (seed / 9 % 5) as usize;
        let cfg = random_valid_config(&mut rng, m, n, 9);
        let model = Model::build(cfg.clone(), seed).unwrap();
        let x = Tensor::new(cfg.input_shape.to_vec(), random_input(&mut rng, cfg.input_shape)).unwrap();
        let t = classex::inference::dynamic_infer(&model, &x, &BetaSchedule::zeros(n)).unwrap();
        prop_assert_eq!(t.exit_layer, n);
        prop_assert_eq!(t.exit_reason, ExitReason::FinalLayer);
        prop_assert_eq!(t.predicted_class, model.predict_static(&x).unwrap());
        prop_assert!(t.events.iter().all(|e| e.excluded.is_empty()));
        prop_assert!(t.flops > model.cost().static_flops());
    }

    #[test]
    fn remaining_set_matches_a_vec_model(m in 1usize..200, ops in prop::collection::vec((any::<bool>(), 0usize..200), 0..64)) {
        let mut set = RemainingSet::empty(m);
        let mut model = vec![false; m];
        for (insert, c) in ops {
            let c = c % m;
            if insert { set.insert(c) } else { set.remove(c) }
            model[c] = insert;
        }
        let want: Vec<usize> = (0..m).filter(|&c| model[c]).collect();
        prop_assert_eq!(set.to_vec(), want.clone());
        prop_assert_eq!(set.len(), want.len());
        prop_assert_eq!(RemainingSet::from_classes(m, &want).unwrap(), set.clone());
        prop_assert!(set.is_subset_of(&RemainingSet::full(m)));
    }
}
