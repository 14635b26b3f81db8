//! STS-style evaluation (Spearman of cosine vs gold), alignment/uniformity
//! measurement and a logistic-regression probe on frozen embeddings.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, LabeledSet, ScoredPairSet, Vocab};
use crate::encoder::{forward_embed, EncoderWeights, MaskSet};
use crate::error::{Error, Result};
use crate::scoring::{alignment_loss, uniformity_loss};
use crate::tensor::{Mat, Real};
use crate::train::{cosine_sim, normalize_rows};

/// Gold score at or above which an evaluation pair counts as a positive pair.
pub const ALIGNMENT_MIN_GOLD: f64 = 4.0;

const EMBED_CHUNK: usize = 64;

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metric("correlation of a constant sequence".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average-tie ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Metric(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Metric("spearman needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite input".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Dropout-free embeddings of `sentences`, computed in chunks, as `f64`.
pub fn embed_sentences<T: Real>(
    weights: &EncoderWeights<T>,
    masks: &MaskSet<T>,
    vocab: &Vocab,
    sentences: &[&str],
) -> Result<Mat<f64>> {
    let mut out = Mat::zeros(sentences.len(), weights.hidden_dim());
    for (c, chunk) in sentences.chunks(EMBED_CHUNK).enumerate() {
        let batch: Vec<Vec<u32>> = chunk.iter().map(|s| tokenize(s, vocab)).collect();
        let emb = forward_embed(&batch, weights, masks, None)?;
        for (i, v) in emb.data.iter().enumerate() {
            out.data[c * EMBED_CHUNK * emb.cols + i] = v.f64();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StsMetrics {
    pub spearman: f64,
    pub alignment: f64,
    pub uniformity: f64,
}

/// Alignment over the high-gold pairs and uniformity over the distinct
/// sentences, both on unit-normalized embeddings.
pub fn alignment_uniformity(
    emb_a: &Mat<f64>,
    emb_b: &Mat<f64>,
    gold: &[f64],
    distinct: &Mat<f64>,
    eps_log: f64,
) -> Result<(f64, f64)> {
    let keep: Vec<usize> = (0..gold.len()).filter(|&i| gold[i] >= ALIGNMENT_MIN_GOLD).collect();
    if keep.is_empty() {
        return Err(Error::Metric(format!("no pairs with gold >= {ALIGNMENT_MIN_GOLD}")));
    }
    let pick = |m: &Mat<f64>| Mat::from_fn(keep.len(), m.cols, |i, j| m.at(keep[i], j));
    let (ua, _) = normalize_rows(&pick(emb_a))?;
    let (ub, _) = normalize_rows(&pick(emb_b))?;
    let (ud, _) = normalize_rows(distinct)?;
    Ok((alignment_loss(&ua, &ub, eps_log)?, uniformity_loss(&ud)?))
}

/// Spearman between pair cosines and gold scores, plus alignment/uniformity.
pub fn eval_sts<T: Real>(
    weights: &EncoderWeights<T>,
    masks: &MaskSet<T>,
    vocab: &Vocab,
    pairs: &ScoredPairSet,
    eps_log: f64,
) -> Result<StsMetrics> {
    if pairs.len() < 2 {
        return Err(Error::Metric("evaluation needs at least two pairs".into()));
    }
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &pairs.pairs {
        for s in [p.a.as_str(), p.b.as_str()] {
            let n = index.len();
            index.entry(s).or_insert(n);
        }
    }
    let mut distinct: Vec<&str> = vec![""; index.len()];
    for (s, &i) in &index {
        distinct[i] = s;
    }
    let emb = embed_sentences(weights, masks, vocab, &distinct)?;
    let rows = |f: &dyn Fn(&crate::corpus::ScoredPair) -> &str| {
        Mat::from_fn(pairs.len(), emb.cols, |i, j| emb.at(index[f(&pairs.pairs[i])], j))
    };
    let emb_a = rows(&|p| p.a.as_str());
    let emb_b = rows(&|p| p.b.as_str());
    let gold: Vec<f64> = pairs.pairs.iter().map(|p| p.gold).collect();
    let (alignment, uniformity) = alignment_uniformity(&emb_a, &emb_b, &gold, &emb, eps_log)?;
    let predicted: Vec<f64> = (0..pairs.len())
        .map(|i| cosine_sim(emb_a.row(i), emb_b.row(i)))
        .collect::<Result<_>>()?;
    let spearman = spearman(&predicted, &gold)?;
    Ok(StsMetrics {
        spearman,
        alignment,
        uniformity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 500,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized features; returns accuracy on `test`. Test labels the
/// model cannot emit count as errors.
pub fn probe_accuracy(
    train_x: &Mat<f64>,
    train_y: &[usize],
    test_x: &Mat<f64>,
    test_y: &[usize],
    config: &ProbeConfig,
) -> Result<f64> {
    let classes = train_y.iter().max().map_or(0, |m| m + 1);
    let present = {
        let mut seen = vec![false; classes];
        train_y.iter().for_each(|&y| seen[y] = true);
        seen.iter().filter(|s| **s).count()
    };
    if present < 2 {
        return Err(Error::Config("probe training set needs at least two classes".into()));
    }
    if test_y.is_empty() {
        return Err(Error::Input("empty probe test set".into()));
    }
    let d = train_x.cols;
    let n = train_x.rows as f64;
    let mean: Vec<f64> = (0..d).map(|j| (0..train_x.rows).map(|i| train_x.at(i, j)).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = (0..train_x.rows).map(|i| (train_x.at(i, j) - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 { v.sqrt() } else { 1.0 }
        })
        .collect();
    let standardize = |m: &Mat<f64>| Mat::from_fn(m.rows, d, |i, j| (m.at(i, j) - mean[j]) / std[j]);
    let xs = standardize(train_x);
    let xt = standardize(test_x);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w = Mat::from_fn(d, classes, |_, _| (rng.random::<f64>() - 0.5) * 1e-3);
    let mut b = vec![0.0; classes];
    let logits = |x: &[f64], w: &Mat<f64>, b: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| b[c] + x.iter().enumerate().map(|(j, v)| v * w.at(j, c)).sum::<f64>())
            .collect()
    };
    for _ in 0..config.iterations {
        let mut gw = Mat::zeros(d, classes);
        let mut gb = vec![0.0; classes];
        for i in 0..xs.rows {
            let x = xs.row(i);
            let z = logits(x, &w, &b);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let g = (e[c] / s - if c == train_y[i] { 1.0 } else { 0.0 }) / n;
                gb[c] += g;
                for j in 0..d {
                    *gw.at_mut(j, c) += g * x[j];
                }
            }
        }
        for (wv, g) in w.data.iter_mut().zip(&gw.data) {
            *wv -= config.learning_rate * g;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= config.learning_rate * g;
        }
    }
    let correct = (0..xt.rows)
        .filter(|&i| {
            let z = logits(xt.row(i), &w, &b);
            let pred = (0..classes).fold(0, |best, c| if z[c] > z[best] { c } else { best });
            pred == test_y[i]
        })
        .count();
    Ok(correct as f64 / xt.rows as f64)
}

/// Probe accuracy of frozen sentence embeddings.
pub fn linear_probe<T: Real>(
    weights: &EncoderWeights<T>,
    masks: &MaskSet<T>,
    vocab: &Vocab,
    train: &LabeledSet,
    test: &LabeledSet,
    config: &ProbeConfig,
) -> Result<f64> {
    let embed = |set: &LabeledSet| {
        let s: Vec<&str> = set.examples.iter().map(|e| e.0.as_str()).collect();
        embed_sentences(weights, masks, vocab, &s)
    };
    let ty: Vec<usize> = train.examples.iter().map(|e| e.1).collect();
    let sy: Vec<usize> = test.examples.iter().map(|e| e.1).collect();
    probe_accuracy(&embed(train)?, &ty, &embed(test)?, &sy, config)
}

/// One evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub sparsity: f64,
    /// `None` for the dense row, which no scoring run produced.
    pub lambda: Option<f64>,
    pub spearman: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub probe_accuracy: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let r: Vec<f64> = x.iter().rev().copied().collect();
        assert!((spearman(&x, &r).unwrap() + 1.0).abs() < 1e-15);
        // ranks [1, 2.5, 2.5, 4] vs [1, 2, 3, 4]
        let rho = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((rho - 0.9486832980505138).abs() < 1e-12);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Metric(_))));
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0]), Err(Error::Metric(_))));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn probe_separable() {
        let x = Mat::from_fn(40, 3, |i, j| if j == 0 { if i % 2 == 0 { 1.0 } else { -1.0 } } else { (i * j % 7) as f64 });
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        assert_eq!(probe_accuracy(&x, &y, &x, &y, &ProbeConfig::default()).unwrap(), 1.0);
        assert!(matches!(
            probe_accuracy(&x, &vec![0; 40], &x, &y, &ProbeConfig::default()),
            Err(Error::Config(_))
        ));
        // A class the probe never saw is always wrong.
        let acc = probe_accuracy(&x, &y, &x, &vec![2; 40], &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 0.0);
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_monotone_transform(v in proptest::collection::vec(-5.0f64..5.0, 3..30), w in proptest::collection::vec(-5.0f64..5.0, 30)) {
            let y = &w[..v.len()];
            if let Ok(rho) = spearman(&v, y) {
                let t: Vec<f64> = v.iter().map(|a| a.exp() * 3.0 + 1.0).collect();
                prop_assert!((spearman(&t, y).unwrap() - rho).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&rho));
            }
        }
    }
}
