use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    attention_backward, attention_forward, ffn_backward, ffn_forward, layer_norm_backward,
    layer_norm_forward, AttentionCache, DropoutStream, FfnCache, NormCache,
};
use super::weights::{EncoderWeights, GradientSet, MaskSet};
use super::{EmbeddingMatrix, CLS_ID};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

/// Dropout on attention probabilities and FFN activations, driven by its own seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

struct LayerCache<T> {
    input: Mat<T>,
    attention: AttentionCache<T>,
    attention_norm: NormCache<T>,
    normed: Mat<T>,
    ffn: FfnCache<T>,
    ffn_norm: NormCache<T>,
}

struct Pass<T> {
    tokens: Vec<u32>,
    positions: Vec<usize>,
    segments: Vec<(usize, usize)>,
    layers: Vec<LayerCache<T>>,
    hidden: Mat<T>,
}

impl<T: Real> Pass<T> {
    fn cls_rows(&self) -> EmbeddingMatrix<T> {
        let d = self.hidden.cols;
        let mut out = Mat::zeros(self.segments.len(), d);
        for (i, &(r0, _)) in self.segments.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.hidden.row(r0));
        }
        out
    }
}

/// Prepend CLS, truncate to `max_seq_len - 1` content tokens and validate ids.
fn layout(batch: &[Vec<u32>], vocab_size: usize, max_seq_len: usize) -> Result<(Vec<u32>, Vec<usize>, Vec<(usize, usize)>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(batch.len());
    for (s, seq) in batch.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::Input(format!("sequence {s} is empty")));
        }
        if let Some(&id) = seq.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::Vocabulary { id, vocab_size });
        }
        let content = &seq[..seq.len().min(max_seq_len - 1)];
        segments.push((tokens.len(), content.len() + 1));
        tokens.push(CLS_ID);
        tokens.extend_from_slice(content);
        positions.extend(0..=content.len());
    }
    Ok((tokens, positions, segments))
}

fn run<T: Real>(
    weights: &EncoderWeights<T>,
    masks: &MaskSet<T>,
    batch: &[Vec<u32>],
    dropout: Option<Dropout>,
) -> Result<Pass<T>> {
    masks.check_against(weights)?;
    let (tokens, positions, segments) =
        layout(batch, weights.vocab_size(), weights.max_seq_len())?;
    let d = weights.hidden_dim();
    let mut x = Mat::zeros(tokens.len(), d);
    for (r, (&t, &p)) in tokens.iter().zip(&positions).enumerate() {
        let te = weights.token_embedding.row(t as usize);
        let pe = weights.position_embedding.row(p);
        for ((o, a), b) in x.row_mut(r).iter_mut().zip(te).zip(pe) {
            *o = *a + *b;
        }
    }
    let mut rng = dropout
        .filter(|d| d.rate > 0.0)
        .map(|d| (ChaCha8Rng::seed_from_u64(d.seed), d.rate));
    let mut layers = Vec::with_capacity(weights.layers.len());
    for (l, layer) in weights.layers.iter().enumerate() {
        let stream = rng
            .as_mut()
            .map(|(r, rate)| DropoutStream { rng: r, rate: *rate });
        let (attn_out, attention) =
            attention_forward(&x, &segments, &layer.attention, &masks.heads[l], stream);
        let mut resid = attn_out;
        resid.data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += *b);
        let (normed, attention_norm) = layer_norm_forward(&resid, &layer.attention_norm);
        let stream = rng
            .as_mut()
            .map(|(r, rate)| DropoutStream { rng: r, rate: *rate });
        let (ffn_out, ffn) = ffn_forward(&normed, &layer.ffn, &masks.neurons[l], stream);
        let mut resid = ffn_out;
        resid.data.iter_mut().zip(&normed.data).for_each(|(a, b)| *a += *b);
        let (out, ffn_norm) = layer_norm_forward(&resid, &layer.ffn_norm);
        layers.push(LayerCache {
            input: std::mem::replace(&mut x, out),
            attention,
            attention_norm,
            normed,
            ffn,
            ffn_norm,
        });
    }
    Ok(Pass {
        tokens,
        positions,
        segments,
        layers,
        hidden: x,
    })
}

/// Sentence embeddings (final-layer CLS states), one row per input sequence.
pub fn forward_embed<T: Real>(
    batch: &[Vec<u32>],
    weights: &EncoderWeights<T>,
    masks: &MaskSet<T>,
    dropout: Option<Dropout>,
) -> Result<EmbeddingMatrix<T>> {
    Ok(run(weights, masks, batch, dropout)?.cls_rows())
}

/// Records forward passes so their gradients can be taken together.
///
/// Weights and masks passed to [`backward`](Tape::backward) must be the ones
/// every recorded pass was run with.
pub struct Tape<T> {
    passes: Vec<Pass<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape { passes: Vec::new() }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Run and record one forward pass; returns its CLS embeddings.
    pub fn forward(
        &mut self,
        weights: &EncoderWeights<T>,
        masks: &MaskSet<T>,
        batch: &[Vec<u32>],
        dropout: Option<Dropout>,
    ) -> Result<EmbeddingMatrix<T>> {
        let pass = run(weights, masks, batch, dropout)?;
        let emb = pass.cls_rows();
        self.passes.push(pass);
        Ok(emb)
    }

    pub fn num_passes(&self) -> usize {
        self.passes.len()
    }

    /// Final hidden states of every token (CLS rows included) of one pass.
    pub fn hidden(&self, pass: usize) -> &Mat<T> {
        &self.passes[pass].hidden
    }

    /// Token ids of one pass as laid out in [`hidden`](Self::hidden).
    pub fn tokens(&self, pass: usize) -> &[u32] {
        &self.passes[pass].tokens
    }

    /// Backpropagate gradients given w.r.t. each pass's CLS embeddings.
    pub fn backward(
        &self,
        weights: &EncoderWeights<T>,
        masks: &MaskSet<T>,
        cls_grads: &[Mat<T>],
    ) -> Result<GradientSet<T>> {
        self.check_recorded(cls_grads.len())?;
        let token_grads: Vec<Mat<T>> = self
            .passes
            .iter()
            .zip(cls_grads)
            .map(|(p, g)| {
                if (g.rows, g.cols) != (p.segments.len(), p.hidden.cols) {
                    return Err(Error::Shape(format!(
                        "embedding gradient {}x{} for a {}x{} embedding",
                        g.rows,
                        g.cols,
                        p.segments.len(),
                        p.hidden.cols
                    )));
                }
                let mut full = Mat::zeros(p.hidden.rows, p.hidden.cols);
                for (i, &(r0, _)) in p.segments.iter().enumerate() {
                    full.row_mut(r0).copy_from_slice(g.row(i));
                }
                Ok(full)
            })
            .collect::<Result<_>>()?;
        self.backward_tokens(weights, masks, &token_grads)
    }

    /// Backpropagate gradients given w.r.t. every token's final hidden state.
    pub fn backward_tokens(
        &self,
        weights: &EncoderWeights<T>,
        masks: &MaskSet<T>,
        token_grads: &[Mat<T>],
    ) -> Result<GradientSet<T>> {
        self.check_recorded(token_grads.len())?;
        masks.check_against(weights)?;
        let mut grads = GradientSet::zeros_like(weights);
        for (pass, g) in self.passes.iter().zip(token_grads) {
            if (g.rows, g.cols) != (pass.hidden.rows, pass.hidden.cols) {
                return Err(Error::Shape("token gradient shape mismatch".into()));
            }
            backward_pass(weights, masks, pass, g, &mut grads);
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(grads)
    }

    fn check_recorded(&self, n: usize) -> Result<()> {
        if self.passes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if n != self.passes.len() {
            return Err(Error::State(format!(
                "{} gradients supplied for {} recorded passes",
                n,
                self.passes.len()
            )));
        }
        Ok(())
    }
}

fn backward_pass<T: Real>(
    weights: &EncoderWeights<T>,
    masks: &MaskSet<T>,
    pass: &Pass<T>,
    d_hidden: &Mat<T>,
    grads: &mut GradientSet<T>,
) {
    let mut dx = d_hidden.clone();
    for (l, (layer, cache)) in weights.layers.iter().zip(&pass.layers).enumerate().rev() {
        let gl = &mut grads.weights.layers[l];
        let d_resid = layer_norm_backward(&layer.ffn_norm, &cache.ffn_norm, &dx, &mut gl.ffn_norm);
        let mut d_normed = ffn_backward(
            &cache.normed,
            &layer.ffn,
            &masks.neurons[l],
            &cache.ffn,
            &d_resid,
            &mut gl.ffn,
            &mut grads.neuron_masks[l],
        );
        d_normed.data.iter_mut().zip(&d_resid.data).for_each(|(a, b)| *a += *b);
        let d_resid = layer_norm_backward(
            &layer.attention_norm,
            &cache.attention_norm,
            &d_normed,
            &mut gl.attention_norm,
        );
        let mut d_in = attention_backward(
            &cache.input,
            &pass.segments,
            &layer.attention,
            &masks.heads[l],
            &cache.attention,
            &d_resid,
            &mut gl.attention,
            &mut grads.head_masks[l],
        );
        d_in.data.iter_mut().zip(&d_resid.data).for_each(|(a, b)| *a += *b);
        dx = d_in;
    }
    let gw = &mut grads.weights;
    for (r, (&t, &p)) in pass.tokens.iter().zip(&pass.positions).enumerate() {
        for (g, d) in gw.token_embedding.row_mut(t as usize).iter_mut().zip(dx.row(r)) {
            *g += *d;
        }
        for (g, d) in gw.position_embedding.row_mut(p).iter_mut().zip(dx.row(r)) {
            *g += *d;
        }
    }
}
