//! Sparsity-constrained selection of heads and neurons to remove, gate
//! materialization, and physical compaction of the pruned network.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{forward_embed, EmbeddingMatrix, EncoderWeights, MaskSet};
use crate::error::{Error, Result};
use crate::scoring::ScoreTable;

/// Slack absorbing binary round-off in `s * pool_size` (0.29 * 100 is
/// 28.999999999999996 in f64).
const COUNT_SLACK: f64 = 1e-9;

/// Fraction of each pool (heads, neurons) to remove.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsitySpec(f64);

impl SparsitySpec {
    pub fn new(s: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&s) {
            return Err(Error::Config(format!("sparsity {s} outside [0, 1)")));
        }
        Ok(SparsitySpec(s))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `floor(s * pool_size)`.
    pub fn count(self, pool_size: usize) -> usize {
        ((self.0 * pool_size as f64 + COUNT_SLACK).floor() as usize).min(pool_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneDecision {
    pub sparsity: f64,
    pub masks: MaskSet<f32>,
    /// `(layer, head)`, in pruning order (lowest score first).
    pub pruned_heads: Vec<(usize, usize)>,
    pub pruned_neurons: Vec<(usize, usize)>,
    /// Highest pruned score per pool, `None` when nothing was pruned.
    pub head_threshold: Option<f64>,
    pub neuron_threshold: Option<f64>,
}

/// Pool entries sorted ascending by `(score, layer, index)`.
fn ranked(pool: &[Vec<f64>]) -> Vec<(f64, usize, usize)> {
    let mut units: Vec<(f64, usize, usize)> = pool
        .iter()
        .enumerate()
        .flat_map(|(l, row)| row.iter().enumerate().map(move |(i, &s)| (s, l, i)))
        .collect();
    units.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    units
}

/// Remove the lowest-scoring `floor(s * pool)` units of each pool.
pub fn select_prune_set(scores: &ScoreTable, spec: SparsitySpec) -> Result<PruneDecision> {
    let all = scores.head_scores.iter().chain(&scores.neuron_scores).flatten();
    if let Some(bad) = all.clone().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Numeric(format!("score {bad} is not finite and nonnegative")));
    }
    let mut masks = MaskSet::<f32>::ones(
        &scores.head_scores.iter().map(Vec::len).collect::<Vec<_>>(),
        &scores.neuron_scores.iter().map(Vec::len).collect::<Vec<_>>(),
    );
    let pick = |pool: &[Vec<f64>], gates: &mut [Vec<f32>]| {
        let order = ranked(pool);
        let n = spec.count(order.len());
        let chosen: Vec<(usize, usize)> = order[..n].iter().map(|&(_, l, i)| (l, i)).collect();
        for &(l, i) in &chosen {
            gates[l][i] = 0.0;
        }
        (chosen, n.checked_sub(1).map(|k| order[k].0))
    };
    let (pruned_heads, head_threshold) = pick(&scores.head_scores, &mut masks.heads);
    let (pruned_neurons, neuron_threshold) = pick(&scores.neuron_scores, &mut masks.neurons);
    Ok(PruneDecision {
        sparsity: spec.value(),
        masks,
        pruned_heads,
        pruned_neurons,
        head_threshold,
        neuron_threshold,
    })
}

/// A model whose forward passes run under a decision's gates.
#[derive(Debug, Clone)]
pub struct MaskedModel<'a> {
    pub weights: &'a EncoderWeights<f32>,
    pub masks: MaskSet<f32>,
}

impl MaskedModel<'_> {
    pub fn embed(&self, batch: &[Vec<u32>]) -> Result<EmbeddingMatrix<f32>> {
        forward_embed(batch, self.weights, &self.masks, None)
    }
}

pub fn apply_masks<'a>(weights: &'a EncoderWeights<f32>, decision: &PruneDecision) -> Result<MaskedModel<'a>> {
    decision
        .masks
        .check_against(weights)
        .map_err(|e| Error::Compatibility(e.to_string()))?;
    Ok(MaskedModel {
        weights,
        masks: decision.masks.clone(),
    })
}

/// Per-layer unit counts of a compacted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactShape {
    pub heads_per_layer: Vec<usize>,
    pub neurons_per_layer: Vec<usize>,
}

/// Physically delete pruned heads (their Q/K/V/O blocks) and neurons (W_1
/// columns, b_1 entries, W_2 rows).
pub fn compact(weights: &EncoderWeights<f32>, decision: &PruneDecision) -> Result<(EncoderWeights<f32>, CompactShape)> {
    decision.masks.check_against(weights)?;
    if !decision.masks.is_binary() {
        return Err(Error::Shape("compaction needs 0/1 gates".into()));
    }
    let mut out = weights.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        let keep_heads: Vec<usize> = (0..decision.masks.heads[l].len())
            .filter(|&h| decision.masks.heads[l][h] == 1.0)
            .collect();
        let keep_neurons: Vec<usize> = (0..decision.masks.neurons[l].len())
            .filter(|&j| decision.masks.neurons[l][j] == 1.0)
            .collect();
        if keep_heads.len() != layer.attention.num_heads() {
            layer.attention = layer.attention.select_heads(&keep_heads);
        }
        if keep_neurons.len() != layer.ffn.width() {
            layer.ffn = layer.ffn.select_neurons(&keep_neurons);
        }
    }
    let shape = CompactShape {
        heads_per_layer: out.heads_per_layer(),
        neurons_per_layer: out.neurons_per_layer(),
    };
    Ok((out, shape))
}

/// Counts and parameter accounting written next to the decision CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub sparsity: f64,
    pub head_pool: usize,
    pub neuron_pool: usize,
    pub pruned_heads: usize,
    pub pruned_neurons: usize,
    pub head_threshold: Option<f64>,
    pub neuron_threshold: Option<f64>,
    pub total_parameters: usize,
    pub removed_parameters: usize,
    /// `removed_parameters / total_parameters`, embeddings included.
    pub parameter_fraction: f64,
}

impl PruneDecision {
    pub fn summary(&self, weights: &EncoderWeights<f32>) -> Result<PruneSummary> {
        let (compacted, _) = compact(weights, self)?;
        let total = weights.num_parameters();
        let removed = total - compacted.num_parameters();
        Ok(PruneSummary {
            sparsity: self.sparsity,
            head_pool: self.masks.heads.iter().map(Vec::len).sum(),
            neuron_pool: self.masks.neurons.iter().map(Vec::len).sum(),
            pruned_heads: self.pruned_heads.len(),
            pruned_neurons: self.pruned_neurons.len(),
            head_threshold: self.head_threshold,
            neuron_threshold: self.neuron_threshold,
            total_parameters: total,
            removed_parameters: removed,
            parameter_fraction: removed as f64 / total as f64,
        })
    }

    /// `unit_type,layer,index,score,pruned` for every unit.
    pub fn to_csv(&self, scores: &ScoreTable) -> String {
        let mut s = String::from("unit_type,layer,index,score,pruned\n");
        for (kind, table, gates) in [
            ("head", &scores.head_scores, &self.masks.heads),
            ("neuron", &scores.neuron_scores, &self.masks.neurons),
        ] {
            for (l, row) in table.iter().enumerate() {
                for (i, v) in row.iter().enumerate() {
                    let _ = writeln!(s, "{kind},{l},{i},{v:e},{}", u8::from(gates[l][i] == 0.0));
                }
            }
        }
        s
    }
}
