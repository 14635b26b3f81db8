//! Alignment and uniformity losses, their lambda-weighted combination, and
//! importance scores: the mean over scoring batches of the absolute gradient
//! of that combined loss w.r.t. each head and neuron gate, taken at gate 1.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, ScoredPairSet, Vocab};
use crate::encoder::{EncoderWeights, MaskSet, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};
use crate::train::{normalize_rows, normalize_rows_backward};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub normalize_embeddings: bool,
    pub eps_log: f64,
    /// Scoring pairs below this gold score are not used as positives.
    pub min_gold: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            lambda: 0.5,
            batch_size: 32,
            normalize_embeddings: true,
            eps_log: 1e-12,
            min_gold: 4.0,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.batch_size == 0 {
            return Err(Error::Config("scoring batch size must be positive".into()));
        }
        if !(self.eps_log > 0.0) {
            return Err(Error::Config("eps_log must be positive".into()));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `log(max(mean_i |h_i - h_i^+|^2, eps_log))`.
pub fn alignment_loss<T: Real>(h: &Mat<T>, hp: &Mat<T>, eps_log: T) -> Result<T> {
    Ok(alignment_grad(h, hp, eps_log)?.0)
}

fn alignment_grad<T: Real>(h: &Mat<T>, hp: &Mat<T>, eps_log: T) -> Result<(T, Mat<T>, Mat<T>)> {
    if (h.rows, h.cols) != (hp.rows, hp.cols) {
        return Err(Error::Shape(format!(
            "embedding matrices {}x{} and {}x{}",
            h.rows, h.cols, hp.rows, hp.cols
        )));
    }
    if h.rows == 0 {
        return Err(Error::Input("alignment needs at least one pair".into()));
    }
    let n = T::c(h.rows as f64);
    let mean = (0..h.rows)
        .map(|i| {
            h.row(i)
                .iter()
                .zip(hp.row(i))
                .map(|(a, b)| (*a - *b) * (*a - *b))
                .sum::<T>()
        })
        .sum::<T>()
        / n;
    let mut dh = Mat::zeros(h.rows, h.cols);
    let mut dhp = Mat::zeros(h.rows, h.cols);
    if mean <= eps_log {
        return Ok((eps_log.ln(), dh, dhp));
    }
    let scale = T::c(2.0) / (n * mean);
    for k in 0..h.data.len() {
        let g = scale * (h.data[k] - hp.data[k]);
        dh.data[k] = g;
        dhp.data[k] = -g;
    }
    Ok((mean.ln(), dh, dhp))
}

/// `log mean_{i<j} exp(-2 |h_i - h_j|^2)`.
pub fn uniformity_loss<T: Real>(h: &Mat<T>) -> Result<T> {
    Ok(uniformity_grad(h)?.0)
}

fn uniformity_grad<T: Real>(h: &Mat<T>) -> Result<(T, Mat<T>)> {
    let n = h.rows;
    if n < 2 {
        return Err(Error::Input("uniformity needs at least two embeddings".into()));
    }
    let mut exps = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: T = h
                .row(i)
                .iter()
                .zip(h.row(j))
                .map(|(a, b)| (*a - *b) * (*a - *b))
                .sum();
            exps.push(T::c(-2.0) * d2);
        }
    }
    let max = exps.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = exps.iter().map(|e| (*e - max).exp()).sum();
    let value = max + total.ln() - T::c(exps.len() as f64).ln();
    let mut dh = Mat::zeros(n, h.cols);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let w = (exps[k] - max).exp() / total;
            k += 1;
            // dL/d(d2) = -2 w; d(d2)/dh_i = 2 (h_i - h_j)
            let g = T::c(-4.0) * w;
            for c in 0..h.cols {
                let diff = h.at(i, c) - h.at(j, c);
                *dh.at_mut(i, c) += g * diff;
                *dh.at_mut(j, c) -= g * diff;
            }
        }
    }
    Ok((value, dh))
}

/// `lambda * align + (1 - lambda) * uniform`.
pub fn joint_score_loss<T: Real>(align: T, uniform: T, lambda: f64) -> Result<T> {
    check_lambda(lambda)?;
    Ok(T::c(lambda) * align + T::c(1.0 - lambda) * uniform)
}

/// Alignment between `h` and `hp` and uniformity over their stacked rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreLoss<T> {
    pub alignment: T,
    pub uniformity: T,
    pub joint: T,
}

/// The combined scoring loss on raw embeddings and its gradient w.r.t. both.
pub fn score_loss_grad<T: Real>(
    h: &Mat<T>,
    hp: &Mat<T>,
    config: &ScoreConfig,
) -> Result<(ScoreLoss<T>, Mat<T>, Mat<T>)> {
    config.validate()?;
    let (u, v, norms) = if config.normalize_embeddings {
        let (u, nu) = normalize_rows(h)?;
        let (v, nv) = normalize_rows(hp)?;
        (u, v, Some((nu, nv)))
    } else {
        (h.clone(), hp.clone(), None)
    };
    let (align, da_u, da_v) = alignment_grad(&u, &v, T::c(config.eps_log))?;
    let mut stacked = Mat::zeros(u.rows + v.rows, u.cols);
    stacked.data[..u.data.len()].copy_from_slice(&u.data);
    stacked.data[u.data.len()..].copy_from_slice(&v.data);
    let (uniform, du_all) = uniformity_grad(&stacked)?;
    let joint = joint_score_loss(align, uniform, config.lambda)?;

    let la = T::c(config.lambda);
    let lu = T::c(1.0 - config.lambda);
    let split = u.data.len();
    let mut du = Mat::zeros(u.rows, u.cols);
    let mut dv = Mat::zeros(v.rows, v.cols);
    for k in 0..split {
        du.data[k] = la * da_u.data[k] + lu * du_all.data[k];
        dv.data[k] = la * da_v.data[k] + lu * du_all.data[split + k];
    }
    let (dh, dhp) = match norms {
        Some((nu, nv)) => (
            normalize_rows_backward(&u, &nu, &du),
            normalize_rows_backward(&v, &nv, &dv),
        ),
        None => (du, dv),
    };
    Ok((
        ScoreLoss {
            alignment: align,
            uniformity: uniform,
            joint,
        },
        dh,
        dhp,
    ))
}

/// Tokenized positive pair.
pub type TokenPair = (Vec<u32>, Vec<u32>);

/// Positive pairs for scoring: pairs with gold at least `min_gold`.
pub fn scoring_pairs(set: &ScoredPairSet, vocab: &Vocab, min_gold: f64) -> Result<Vec<TokenPair>> {
    let pairs: Vec<TokenPair> = set
        .pairs
        .iter()
        .filter(|p| p.gold >= min_gold)
        .map(|p| (tokenize(&p.a, vocab), tokenize(&p.b, vocab)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data(format!("no scoring pairs with gold >= {min_gold}")));
    }
    Ok(pairs)
}

/// Importance per head and per FFN neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub head_scores: Vec<Vec<f64>>,
    pub neuron_scores: Vec<Vec<f64>>,
    pub lambda: f64,
    pub batches: usize,
    pub dataset: String,
}

/// `|dL/dgate|` for every gate on one batch of positive pairs.
pub fn batch_gate_gradients<T: Real>(
    weights: &EncoderWeights<T>,
    masks: &MaskSet<T>,
    batch: &[TokenPair],
    config: &ScoreConfig,
) -> Result<(ScoreLoss<T>, Vec<Vec<T>>, Vec<Vec<T>>)> {
    let left: Vec<Vec<u32>> = batch.iter().map(|p| p.0.clone()).collect();
    let right: Vec<Vec<u32>> = batch.iter().map(|p| p.1.clone()).collect();
    let mut tape = Tape::new();
    let h = tape.forward(weights, masks, &left, None)?;
    let hp = tape.forward(weights, masks, &right, None)?;
    let (loss, dh, dhp) = score_loss_grad(&h, &hp, config)?;
    let g = tape.backward(weights, masks, &[dh, dhp])?;
    Ok((loss, g.head_masks, g.neuron_masks))
}

/// Mean over consecutive batches of `|dL_score/dgate|`, at all-ones gates.
/// Batches run in parallel and are reduced in batch order.
pub fn estimate_importance<T: Real>(
    weights: &EncoderWeights<T>,
    masks: &MaskSet<T>,
    pairs: &[TokenPair],
    config: &ScoreConfig,
    dataset: &str,
) -> Result<ScoreTable> {
    config.validate()?;
    masks.check_against(weights)?;
    if !masks.is_all_ones() {
        return Err(Error::State("importance scores are defined at all-ones masks".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Input("empty scoring set".into()));
    }
    let per_batch: Vec<(Vec<Vec<T>>, Vec<Vec<T>>)> = pairs
        .par_chunks(config.batch_size)
        .map(|b| batch_gate_gradients(weights, masks, b, config).map(|(_, h, n)| (h, n)))
        .collect::<Result<_>>()?;
    let zeros = |v: &Vec<Vec<T>>| v.iter().map(|r| vec![0.0f64; r.len()]).collect::<Vec<_>>();
    let mut heads = zeros(&masks.heads);
    let mut neurons = zeros(&masks.neurons);
    for (h, n) in &per_batch {
        for (acc, g) in heads.iter_mut().zip(h).chain(neurons.iter_mut().zip(n)) {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x.f64().abs();
            }
        }
    }
    let count = per_batch.len() as f64;
    for v in heads.iter_mut().chain(neurons.iter_mut()).flatten() {
        *v /= count;
    }
    if heads.iter().chain(&neurons).flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite importance score".into()));
    }
    Ok(ScoreTable {
        head_scores: heads,
        neuron_scores: neurons,
        lambda: config.lambda,
        batches: per_batch.len(),
        dataset: dataset.to_string(),
    })
}

impl ScoreTable {
    /// `unit_type,layer,index,score` rows, heads first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("unit_type,layer,index,score\n");
        for (kind, table) in [("head", &self.head_scores), ("neuron", &self.neuron_scores)] {
            for (l, row) in table.iter().enumerate() {
                for (i, v) in row.iter().enumerate() {
                    let _ = writeln!(s, "{kind},{l},{i},{v:e}");
                }
            }
        }
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<ScoreTable> {
        let err = |line: usize, m: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: m,
        };
        let mut heads: Vec<Vec<f64>> = Vec::new();
        let mut neurons: Vec<Vec<f64>> = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(i + 1, "expected 4 fields".into()));
            }
            let layer: usize = f[1].parse().map_err(|_| err(i + 1, "bad layer".into()))?;
            let index: usize = f[2].parse().map_err(|_| err(i + 1, "bad index".into()))?;
            let score: f64 = f[3].parse().map_err(|_| err(i + 1, "bad score".into()))?;
            if !score.is_finite() || score < 0.0 {
                return Err(err(i + 1, format!("score {score} must be finite and nonnegative")));
            }
            let table = match f[0] {
                "head" => &mut heads,
                "neuron" => &mut neurons,
                other => return Err(err(i + 1, format!("unknown unit type {other:?}"))),
            };
            if table.len() <= layer {
                table.resize(layer + 1, Vec::new());
            }
            if table[layer].len() != index {
                return Err(err(i + 1, "units must be listed in index order".into()));
            }
            table[layer].push(score);
        }
        Ok(ScoreTable {
            head_scores: heads,
            neuron_scores: neurons,
            lambda: f64::NAN,
            batches: 0,
            dataset: path.display().to_string(),
        })
    }
}
