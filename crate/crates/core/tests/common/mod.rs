//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsecse::config::RunConfig;
use sparsecse::corpus::{parse_scored_pairs, LabeledSet, SentenceCorpus};
use sparsecse::encoder::{forward_embed, init_model, EncoderWeights, MaskSet, ModelConfig};
use sparsecse::pipeline::Dataset;
use sparsecse::scoring::TokenPair;
use sparsecse::synth;
use sparsecse::tensor::Mat;

pub fn scoring_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 60,
        max_seq_len: 12,
        hidden_dim: 32,
        num_layers: 2,
        heads_per_layer: 4,
        head_dim: 8,
        ffn_dim: 64,
        dropout_rate: 0.1,
        seed,
    }
}

/// Initialized weights plus a uniform perturbation, so activations are
/// far from the near-linear regime of a fresh init.
pub fn random_model(config: &ModelConfig, scale: f32) -> EncoderWeights<f32> {
    let mut w = init_model::<f32>(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    for part in w.parts_mut() {
        for x in part.iter_mut() {
            *x += (rng.random::<f32>() - 0.5) * scale;
        }
    }
    w
}

pub fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<u32> {
    let n = rng.random_range(2..=max_len);
    (0..n).map(|_| rng.random_range(4..vocab as u32)).collect()
}

pub fn random_pairs(seed: u64, n: usize, vocab: usize) -> Vec<TokenPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (random_sentence(&mut rng, vocab, 9), random_sentence(&mut rng, vocab, 9)))
        .collect()
}

fn unit_rows(m: &Mat<f64>) -> Vec<Vec<f64>> {
    (0..m.rows)
        .map(|i| {
            let r = m.row(i);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `log(max(mean |a_i - b_i|^2, eps))` by a plain loop.
pub fn brute_alignment(a: &[Vec<f64>], b: &[Vec<f64>], eps: f64) -> f64 {
    let mean = a.iter().zip(b).map(|(x, y)| sq_dist(x, y)).sum::<f64>() / a.len() as f64;
    mean.max(eps).ln()
}

/// `log mean_{i<j} exp(-2 |x_i - x_j|^2)` by a double loop.
pub fn brute_uniformity(x: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            total += (-2.0 * sq_dist(&x[i], &x[j])).exp();
            count += 1;
        }
    }
    (total / count as f64).ln()
}

/// Joint alignment/uniformity score loss evaluated from scratch.
pub fn score_loss_oracle(
    w: &EncoderWeights<f64>,
    m: &MaskSet<f64>,
    pairs: &[TokenPair],
    lambda: f64,
    eps: f64,
) -> f64 {
    let left: Vec<Vec<u32>> = pairs.iter().map(|p| p.0.clone()).collect();
    let right: Vec<Vec<u32>> = pairs.iter().map(|p| p.1.clone()).collect();
    let h = unit_rows(&forward_embed(&left, w, m, None).unwrap());
    let hp = unit_rows(&forward_embed(&right, w, m, None).unwrap());
    let all: Vec<Vec<f64>> = h.iter().chain(&hp).cloned().collect();
    lambda * brute_alignment(&h, &hp, eps) + (1.0 - lambda) * brute_uniformity(&all)
}

/// Richardson-extrapolated central difference, error O(h^4).
pub fn richardson(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// `|dL/dgate|` for every gate by finite differences, heads then neurons.
pub fn fd_gate_magnitudes(
    w: &EncoderWeights<f64>,
    pairs: &[TokenPair],
    lambda: f64,
    eps: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let ones = MaskSet::<f64>::ones_for(w);
    let probe = |is_head: bool, l: usize, i: usize| {
        richardson(
            |dx| {
                let mut m = ones.clone();
                if is_head {
                    m.heads[l][i] += dx;
                } else {
                    m.neurons[l][i] += dx;
                }
                score_loss_oracle(w, &m, pairs, lambda, eps)
            },
            1e-3,
        )
        .abs()
    };
    let heads = (0..ones.heads.len())
        .map(|l| (0..ones.heads[l].len()).map(|i| probe(true, l, i)).collect())
        .collect();
    let neurons = (0..ones.neurons.len())
        .map(|l| (0..ones.neurons[l].len()).map(|i| probe(false, l, i)).collect())
        .collect();
    (heads, neurons)
}

/// Worst relative error over gates whose oracle magnitude exceeds `floor`,
/// and how many gates were compared.
pub fn worst_score_error(scores: (&[Vec<f64>], &[Vec<f64>]), oracle: &(Vec<Vec<f64>>, Vec<Vec<f64>>), floor: f64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for (a, b) in scores.0.iter().flatten().zip(oracle.0.iter().flatten()).chain(scores.1.iter().flatten().zip(oracle.1.iter().flatten())) {
        if b.abs() > floor {
            worst = worst.max(rel_err(*a, *b));
            n += 1;
        }
    }
    (worst, n)
}

/// Brute-force Spearman: average-tie ranks by counting, then Pearson.
pub fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn labeled(text: &str) -> LabeledSet {
    LabeledSet::new(
        text.lines()
            .map(|l| {
                let (y, s) = l.split_once('\t').unwrap();
                (s.to_string(), y.parse().unwrap())
            })
            .collect(),
    )
    .unwrap()
}

/// Generated data, held in memory.
pub fn synthetic_dataset(config: &RunConfig, sentences: usize, seed: u64) -> Dataset {
    let d = synth::generate(sentences, seed).unwrap();
    let corpus = SentenceCorpus::new(d.corpus.lines().map(String::from).collect()).unwrap();
    let score = parse_scored_pairs(&d.score_pairs, Path::new(synth::SCORE_PAIRS_FILE)).unwrap();
    let eval = parse_scored_pairs(&d.eval_pairs, Path::new(synth::EVAL_PAIRS_FILE)).unwrap();
    let probe = Some((labeled(&d.probe_train), labeled(&d.probe_test)));
    Dataset::new(&corpus, &score, eval, probe, config).unwrap()
}

/// A configuration small enough for a full pipeline in seconds.
pub fn small_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model = ModelConfig {
        vocab_size: 200,
        max_seq_len: 16,
        hidden_dim: 16,
        num_layers: 2,
        heads_per_layer: 4,
        head_dim: 4,
        ffn_dim: 32,
        dropout_rate: 0.1,
        seed: 5,
    };
    c.train.batch_size = 8;
    c.train.pretrain_steps = 40;
    c.train.rewind_step = 4;
    c.train.contrastive_steps = 30;
    c.probe.iterations = 50;
    c.sweep.record_wallclock = false;
    c
}
