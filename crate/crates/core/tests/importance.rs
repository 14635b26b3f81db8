//! Importance scores against a finite-difference oracle of the score loss.

mod common;

use common::*;
use sparsecse::encoder::MaskSet;
use sparsecse::scoring::{estimate_importance, ScoreConfig};

fn setup(seed: u64) -> (sparsecse::encoder::EncoderWeights<f32>, Vec<sparsecse::scoring::TokenPair>, ScoreConfig) {
    let model = scoring_model_config(seed);
    let w = random_model(&model, 0.4);
    let pairs = random_pairs(seed + 100, 8, model.vocab_size);
    let cfg = ScoreConfig {
        batch_size: 8,
        ..Default::default()
    };
    (w, pairs, cfg)
}

#[test]
fn scores_match_oracle_in_f64() {
    for seed in [1, 2] {
        let (w, pairs, cfg) = setup(seed);
        let w64 = w.cast::<f64>();
        let table = estimate_importance(&w64, &MaskSet::ones_for(&w64), &pairs, &cfg, "t").unwrap();
        let oracle = fd_gate_magnitudes(&w64, &pairs, cfg.lambda, cfg.eps_log);
        let (worst, n) = worst_score_error((&table.head_scores, &table.neuron_scores), &oracle, 1e-8);
        assert!(n > 100, "only {n} gates above the floor");
        assert!(worst < 1e-7, "seed {seed}: worst relative error {worst}");
    }
}

#[test]
fn f32_scores_track_f64_scores() {
    let (w, pairs, cfg) = setup(3);
    let w64 = w.cast::<f64>();
    let t64 = estimate_importance(&w64, &MaskSet::ones_for(&w64), &pairs, &cfg, "t").unwrap();
    let t32 = estimate_importance(&w, &MaskSet::ones_for(&w), &pairs, &cfg, "t").unwrap();
    let max = t64.neuron_scores.iter().chain(&t64.head_scores).flatten().fold(0.0f64, |a, b| a.max(*b));
    let oracle = (t64.head_scores.clone(), t64.neuron_scores.clone());
    let (worst, _) = worst_score_error((&t32.head_scores, &t32.neuron_scores), &oracle, 1e-2 * max);
    assert!(worst < 1e-2, "f32 vs f64 relative error {worst}");
}

#[test]
fn scores_scale_with_lambda_mix() {
    // lambda = 1 scores only the alignment term, lambda = 0 only uniformity;
    // the joint gradient is their convex combination before the absolute value.
    let (w, pairs, cfg) = setup(4);
    let w64 = w.cast::<f64>();
    let ones = MaskSet::ones_for(&w64);
    let at = |lambda| {
        let c = ScoreConfig { lambda, ..cfg.clone() };
        sparsecse::scoring::batch_gate_gradients(&w64, &ones, &pairs, &c).unwrap()
    };
    let (_, ha, _) = at(1.0);
    let (_, hu, _) = at(0.0);
    let (_, hj, _) = at(0.3);
    for l in 0..2 {
        for i in 0..4 {
            let mix = 0.3 * ha[l][i] + 0.7 * hu[l][i];
            assert!((mix - hj[l][i]).abs() < 1e-12 * (1.0 + mix.abs()));
        }
    }
}
