//! Closed-form cost model against hand-derived counts and the run-time op
//! counter.

mod common;

use classex::calibration::rank_exits_by_macs;
use classex::config::desk_model;
use classex::costmodel::CostModel;
use classex::inference::{confidence_infer, dynamic_infer, BetaSchedule, ConfidenceConfig, ConfidenceCriterion};
use classex::model::{LayerSpec, Model, ModelConfig};
use classex::tensor::{counter, Tensor};
use common::{random_input, random_valid_config};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Walks the backbone by hand: `(macs, flops)` per layer.
fn hand_counts(cfg: &ModelConfig) -> Vec<(u64, u64)> {
    let [mut c, mut h, mut w] = cfg.input_shape;
    let mut flat: Option<usize> = None;
    let mut out = Vec::new();
    for spec in &cfg.backbone {
        match *spec {
            LayerSpec::Conv { channels, kernel, stride, pad, activation } => {
                let ho = (h + 2 * pad - kernel) / stride + 1;
                let wo = (w + 2 * pad - kernel) / stride + 1;
                let macs = (channels * c * kernel * kernel * ho * wo) as u64;
                let outs = (channels * ho * wo) as u64;
                let relu = if activation == classex::model::Activation::Relu { outs } else { 0 };
                out.push((macs, 2 * macs + outs + relu));
                (c, h, w) = (channels, ho, wo);
            }
            LayerSpec::Pool { kernel, stride } => {
                let ho = (h - kernel) / stride + 1;
                let wo = (w - kernel) / stride + 1;
                out.push((0, (c * ho * wo * (kernel * kernel - 1)) as u64));
                (h, w) = (ho, wo);
            }
            LayerSpec::Dense { units, activation } => {
                let inputs = flat.unwrap_or(c * h * w);
                let macs = (units * inputs) as u64;
                let relu = if activation == classex::model::Activation::Relu { units as u64 } else { 0 };
                out.push((macs, 2 * macs + units as u64 + relu));
                flat = Some(units);
            }
        }
    }
    out
}

#[test]
fn desk_model_layer_counts() {
    let cfg = desk_model(10);
    let cost = CostModel::from_config(&cfg).unwrap();
    let hand = hand_counts(&cfg);
    for (l, lc) in cost.layers.iter().enumerate() {
        assert_eq!((lc.macs, lc.flops), hand[l], "layer {l}");
    }
    // 1x16x16 -> 32@16 -> pool 8 -> 64@8 -> pool 4 -> 96@4 -> 128@4
    assert_eq!(cost.layers[0].macs, 32 * 9 * 256);
    assert_eq!(cost.layers[2].macs, 64 * 32 * 9 * 64);
    assert_eq!(cost.layers[4].macs, 96 * 64 * 9 * 16);
    assert_eq!(cost.layers[5].macs, 128 * 96 * 9 * 16);
    // Exit overhead: GAP, affine C->M, sigmoid.
    let e = &cost.exits[0];
    assert_eq!(e.exclusion_flops, (32 * 256 + 2 * 32 * 10 + 10 + 10) as u64);
    assert_eq!(e.exclusion_macs, 320);
    assert_eq!(rank_exits_by_macs(&cost).unwrap(), vec![4, 2, 3, 1]);
}

#[test]
fn ranking_breaks_ties_toward_shallower_exits() {
    assert_eq!(classex::calibration::rank_by_macs(&[5, 9, 9, 1]), vec![2, 3, 1, 4]);
}

#[test]
fn static_pass_matches_the_counter_on_desk_model() {
    let model = Model::build(desk_model(10), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::new(vec![1, 16, 16], random_input(&mut rng, [1, 16, 16])).unwrap();
    let (_, got) = counter::measure(|| model.predict_static(&x).unwrap());
    assert_eq!(got.macs, model.cost().static_macs());
    assert_eq!(got.flops, model.cost().static_flops());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn closed_form_matches_hand_walk(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = (rng.random_range(2..=10), rng.random_range(1..=5));
        let cfg = random_valid_config(&mut rng, m, n, 16);
        let cost = CostModel::from_config(&cfg).unwrap();
        let hand = hand_counts(&cfg);
        for (l, lc) in cost.layers.iter().enumerate() {
            prop_assert_eq!((lc.macs, lc.flops), hand[l]);
        }
        let backbone: u64 = hand.iter().map(|x| x.1).sum();
        prop_assert_eq!(cost.static_flops(), backbone + cost.classifier_flops);
    }

    #[test]
    fn traced_costs_match_the_counter(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = (rng.random_range(2..=10), rng.random_range(1..=5));
        let cfg = random_valid_config(&mut rng, m, n, 12);
        let model = Model::build(cfg.clone(), seed).unwrap();
        let x = Tensor::new(cfg.input_shape.to_vec(), random_input(&mut rng, cfg.input_shape)).unwrap();
        let betas = BetaSchedule::new((0..n).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
        let (t, got) = counter::measure(|| dynamic_infer(&model, &x, &betas).unwrap());
        prop_assert_eq!((got.macs, got.flops), (t.macs, t.flops));
        let cc = ConfidenceConfig::uniform(n, rng.random_range(0.0..1.0), ConfidenceCriterion::Entropy);
        let (t, got) = counter::measure(|| confidence_infer(&model, &x, &cc).unwrap());
        prop_assert_eq!((got.macs, got.flops), (t.macs, t.flops));
    }

    #[test]
    fn deeper_exits_cost_more(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = (rng.random_range(2..=10), rng.random_range(2..=5));
        let cost = CostModel::from_config(&random_valid_config(&mut rng, m, n, 12)).unwrap();
        let mut spent = 0u64;
        let mut prev = 0u64;
        for e in &cost.exits {
            spent += e.stage_flops + e.exclusion_flops;
            prop_assert!(spent > prev);
            prev = spent;
        }
        prop_assert!(spent + cost.tail_flops > prev);
    }
}
