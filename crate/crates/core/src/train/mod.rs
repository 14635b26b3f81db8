//! Contrastive objective, masked-token surrogate pretraining, contrastive
//! training and rewind-then-retrain.

mod loss;
mod optim;

use std::fmt::Write as _;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{contrastive_loss, contrastive_loss_grad, cosine_sim};
pub(crate) use loss::{normalize_rows, normalize_rows_backward};
pub use optim::Adam;

use crate::corpus::{make_batches, MASK_ID};
use crate::encoder::{Dropout, EncoderWeights, MaskSet, ModelConfig, Tape};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub temperature: f64,
    /// Contrastive (and rewind-stage) learning rate.
    pub learning_rate: f64,
    pub pretrain_learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub contrastive_steps: usize,
    /// Pretraining step whose weights become the rewind target.
    pub rewind_step: usize,
    pub mlm_probability: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 0.05,
            learning_rate: 1e-4,
            pretrain_learning_rate: 1e-3,
            batch_size: 32,
            pretrain_steps: 500,
            contrastive_steps: 1000,
            rewind_step: 50,
            mlm_probability: 0.15,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.pretrain_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} < 2 leaves no in-batch negatives",
                self.batch_size
            )));
        }
        if self.rewind_step >= self.pretrain_steps {
            return Err(Error::Config(format!(
                "rewind_step {} must be below pretrain_steps {}",
                self.rewind_step, self.pretrain_steps
            )));
        }
        if !(0.0..1.0).contains(&self.mlm_probability) || self.mlm_probability == 0.0 {
            return Err(Error::Config("mlm_probability must be in (0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    fn adam(&self, learning_rate: f64) -> Adam<f32> {
        Adam::new(
            learning_rate,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.weight_decay,
        )
    }
}

/// SplitMix64-style mixing of a base seed with stream tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(t.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const TAG_PRETRAIN_BATCH: u64 = 1;
const TAG_PRETRAIN_MASK: u64 = 2;
const TAG_PRETRAIN_DROPOUT: u64 = 3;
const TAG_CONTRASTIVE_BATCH: u64 = 4;
const TAG_CONTRASTIVE_DROPOUT: u64 = 5;

/// CRC-32 of the model configuration's JSON form.
pub fn config_hash(config: &ModelConfig) -> u32 {
    crc32fast::hash(serde_json::to_string(config).expect("config serializes").as_bytes())
}

/// Pretraining snapshot the pruned model is rewound to.
#[derive(Debug, Clone, PartialEq)]
pub struct RewindCheckpoint {
    pub weights: EncoderWeights<f32>,
    pub step: usize,
    pub config_hash: u32,
}

/// Per-step training loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<(usize, f64)>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.rows {
            let _ = writeln!(s, "{step},{loss}");
        }
        s
    }

    /// Mean loss over `rows[range]`.
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let w = &self.rows[range];
        w.iter().map(|r| r.1).sum::<f64>() / w.len() as f64
    }
}

/// Epoch-by-epoch shuffled batches of sentence indices.
struct BatchStream {
    len: usize,
    batch_size: usize,
    seed: u64,
    tag: u64,
    epoch: u64,
    queue: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    fn new(len: usize, batch_size: usize, seed: u64, tag: u64) -> Result<Self> {
        if len < 2 {
            return Err(Error::Data("training corpus needs at least two sentences".into()));
        }
        make_batches(len, batch_size, 0)?;
        Ok(BatchStream {
            len,
            batch_size,
            seed,
            tag,
            epoch: 0,
            queue: Vec::new().into_iter(),
        })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        loop {
            if let Some(b) = self.queue.next() {
                return b;
            }
            let s = derive_seed(self.seed, &[self.tag, self.epoch]);
            self.epoch += 1;
            self.queue = make_batches(self.len, self.batch_size, s)
                .expect("validated batch size")
                .into_iter();
        }
    }
}

fn usable(corpus: &[Vec<u32>]) -> Vec<Vec<u32>> {
    corpus.iter().filter(|s| !s.is_empty()).cloned().collect()
}

fn optimizer_step(opt: &mut Adam<f32>, weights: &mut EncoderWeights<f32>, grads: &EncoderWeights<f32>) {
    let g: Vec<&[f32]> = grads.parts().into_iter().map(|(_, _, d)| d).collect();
    opt.step(weights.parts_mut(), g);
}

pub struct PretrainOutput {
    pub weights: EncoderWeights<f32>,
    pub rewind: RewindCheckpoint,
    pub log: TrainLog,
}

/// Masked-token prediction with the output projection tied to the token
/// embedding; snapshots the weights after `rewind_step` updates.
pub fn pretrain_mlm(
    mut weights: EncoderWeights<f32>,
    corpus: &[Vec<u32>],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<PretrainOutput> {
    config.validate()?;
    model.validate()?;
    let corpus = usable(corpus);
    let masks = MaskSet::<f32>::ones_for(&weights);
    let mut stream = BatchStream::new(corpus.len(), config.batch_size, config.seed, TAG_PRETRAIN_BATCH)?;
    let mut opt = config.adam(config.pretrain_learning_rate);
    let mut bias_opt = config.adam(config.pretrain_learning_rate);
    let vocab = weights.vocab_size();
    let mut output_bias = vec![0.0f32; vocab];
    let max_content = weights.max_seq_len() - 1;
    let mut log = TrainLog::default();
    let mut rewind = None;

    for step in 0..config.pretrain_steps {
        if step == config.rewind_step {
            rewind = Some(weights.clone());
        }
        let idx = stream.next_batch();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_PRETRAIN_MASK, step as u64]));
        let mut batch = Vec::with_capacity(idx.len());
        // (row in the stacked hidden states, original token)
        let mut targets: Vec<(usize, u32)> = Vec::new();
        let mut row = 0;
        for &i in &idx {
            let mut seq = corpus[i].clone();
            seq.truncate(max_content);
            for (k, tok) in seq.iter_mut().enumerate() {
                if rng.random::<f64>() < config.mlm_probability {
                    targets.push((row + 1 + k, *tok));
                    *tok = MASK_ID;
                }
            }
            row += seq.len() + 1;
            batch.push(seq);
        }
        if targets.is_empty() {
            targets.push((1, batch[0][0]));
            batch[0][0] = MASK_ID;
        }

        let dropout = Dropout {
            rate: model.dropout_rate,
            seed: derive_seed(config.seed, &[TAG_PRETRAIN_DROPOUT, step as u64]),
        };
        let mut tape = Tape::new();
        tape.forward(&weights, &masks, &batch, Some(dropout))?;
        let hidden = tape.hidden(0);
        let d = hidden.cols;
        let m = targets.len();
        let mut picked = Mat::zeros(m, d);
        for (r, &(hr, _)) in targets.iter().enumerate() {
            picked.row_mut(r).copy_from_slice(hidden.row(hr));
        }
        let mut logits = Mat::zeros(m, vocab);
        gemm(1.0, picked.view(), weights.token_embedding.view().t(), 0.0, logits.view_mut());
        let mut loss = 0.0f64;
        let inv_m = 1.0 / m as f32;
        for (r, &(_, tok)) in targets.iter().enumerate() {
            let row = logits.row_mut(r);
            for (x, b) in row.iter_mut().zip(&output_bias) {
                *x += *b;
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = row.iter().map(|x| (x - max).exp()).sum();
            loss += (max + z.ln() - row[tok as usize]) as f64;
            for x in row.iter_mut() {
                *x = (*x - max).exp() / z * inv_m;
            }
            row[tok as usize] -= inv_m;
        }
        loss /= m as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("pretraining loss diverged at step {step}")));
        }
        // logits now holds dLoss/dlogits.
        let mut d_picked = Mat::zeros(m, d);
        gemm(1.0, logits.view(), weights.token_embedding.view(), 0.0, d_picked.view_mut());
        let mut d_hidden = Mat::zeros(hidden.rows, d);
        for (r, &(hr, _)) in targets.iter().enumerate() {
            for (o, g) in d_hidden.row_mut(hr).iter_mut().zip(d_picked.row(r)) {
                *o += *g;
            }
        }
        let mut grads = tape.backward_tokens(&weights, &masks, &[d_hidden])?;
        gemm(1.0, logits.view().t(), picked.view(), 1.0, grads.weights.token_embedding.view_mut());
        let mut d_bias = vec![0.0f32; vocab];
        for r in 0..m {
            for (b, g) in d_bias.iter_mut().zip(logits.row(r)) {
                *b += *g;
            }
        }
        optimizer_step(&mut opt, &mut weights, &grads.weights);
        bias_opt.step(vec![&mut output_bias], vec![&d_bias]);
        log.rows.push((step, loss));
        if step % 100 == 0 {
            debug!("pretrain step {step}: loss {loss:.4}");
        }
    }
    info!(
        "pretraining done: {} steps, final loss {:.4}",
        config.pretrain_steps,
        log.rows.last().map_or(f64::NAN, |r| r.1)
    );
    let rewind = RewindCheckpoint {
        weights: rewind.expect("rewind_step < pretrain_steps"),
        step: config.rewind_step,
        config_hash: config_hash(model),
    };
    Ok(PretrainOutput { weights, rewind, log })
}

/// Unsupervised contrastive training: two dropout passes per batch give the
/// positive pairs, the rest of the batch the negatives. Gates are fixed.
pub fn train_contrastive(
    mut weights: EncoderWeights<f32>,
    corpus: &[Vec<u32>],
    model: &ModelConfig,
    config: &TrainConfig,
    masks: &MaskSet<f32>,
) -> Result<(EncoderWeights<f32>, TrainLog)> {
    config.validate()?;
    masks.check_against(&weights)?;
    let corpus = usable(corpus);
    let mut stream = BatchStream::new(corpus.len(), config.batch_size, config.seed, TAG_CONTRASTIVE_BATCH)?;
    let mut opt = config.adam(config.learning_rate);
    let tau = config.temperature as f32;
    let mut log = TrainLog::default();
    for step in 0..config.contrastive_steps {
        let batch: Vec<Vec<u32>> = stream.next_batch().into_iter().map(|i| corpus[i].clone()).collect();
        let mut tape = Tape::new();
        let mut views = Vec::with_capacity(2);
        for pass in 0..2u64 {
            let dropout = Dropout {
                rate: model.dropout_rate,
                seed: derive_seed(config.seed, &[TAG_CONTRASTIVE_DROPOUT, step as u64, pass]),
            };
            views.push(tape.forward(&weights, masks, &batch, Some(dropout))?);
        }
        let (loss, dh, dhp) = contrastive_loss_grad(&views[0], &views[1], tau)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("contrastive loss diverged at step {step}")));
        }
        let grads = tape.backward(&weights, masks, &[dh, dhp])?;
        optimizer_step(&mut opt, &mut weights, &grads.weights);
        log.rows.push((step, loss as f64));
        if step % 100 == 0 {
            debug!("contrastive step {step}: loss {loss:.4}");
        }
    }
    if !weights.is_finite() {
        return Err(Error::Numeric("non-finite weights after training".into()));
    }
    Ok((weights, log))
}

/// Weights to restart from: the snapshot itself, after checking it was
/// taken from a model of this configuration.
pub fn rewind(checkpoint: &RewindCheckpoint, model: &ModelConfig) -> Result<EncoderWeights<f32>> {
    let expected = config_hash(model);
    if checkpoint.config_hash != expected {
        return Err(Error::Compatibility(format!(
            "rewind checkpoint config hash {:08x} != current {:08x}",
            checkpoint.config_hash, expected
        )));
    }
    Ok(checkpoint.weights.clone())
}

/// Reset to the rewind snapshot, then retrain contrastively under the pruned gates.
pub fn rewind_and_retrain(
    pruned_masks: &MaskSet<f32>,
    checkpoint: &RewindCheckpoint,
    corpus: &[Vec<u32>],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(EncoderWeights<f32>, TrainLog)> {
    let weights = rewind(checkpoint, model)?;
    train_contrastive(weights, corpus, model, config, pruned_masks)
}
