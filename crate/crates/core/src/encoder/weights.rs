use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

/// All heads of one attention block. Head `i` owns columns
/// `[i * head_dim, (i + 1) * head_dim)` of the Q/K/V projections, the same
/// rows of `output`, and row `i` of `output_bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights<T> {
    pub head_dim: usize,
    pub query: Mat<T>,
    pub query_bias: Vec<T>,
    pub key: Mat<T>,
    pub key_bias: Vec<T>,
    pub value: Mat<T>,
    pub value_bias: Vec<T>,
    pub output: Mat<T>,
    pub output_bias: Mat<T>,
}

impl<T: Real> AttentionWeights<T> {
    pub fn num_heads(&self) -> usize {
        self.query.cols / self.head_dim
    }

    fn column_block(m: &Mat<T>, head: usize, width: usize) -> Mat<T> {
        Mat::from_fn(m.rows, width, |i, j| m.at(i, head * width + j))
    }

    /// `W_Q` of one head, `d x d_A`.
    pub fn head_query(&self, head: usize) -> Mat<T> {
        Self::column_block(&self.query, head, self.head_dim)
    }

    pub fn head_key(&self, head: usize) -> Mat<T> {
        Self::column_block(&self.key, head, self.head_dim)
    }

    pub fn head_value(&self, head: usize) -> Mat<T> {
        Self::column_block(&self.value, head, self.head_dim)
    }

    /// `W_O` of one head, `d_A x d`.
    pub fn head_output(&self, head: usize) -> Mat<T> {
        let a = self.head_dim;
        Mat::from_fn(a, self.output.cols, |i, j| self.output.at(head * a + i, j))
    }

    /// Zero the output projection slice and bias of one head.
    pub fn zero_head_output(&mut self, head: usize) {
        let a = self.head_dim;
        for r in head * a..(head + 1) * a {
            self.output.row_mut(r).fill(T::zero());
        }
        self.output_bias.row_mut(head).fill(T::zero());
    }

    /// Copy with only the listed heads, in order.
    pub fn select_heads(&self, keep: &[usize]) -> Self {
        let a = self.head_dim;
        let cols = |m: &Mat<T>| {
            Mat::from_fn(m.rows, keep.len() * a, |i, j| m.at(i, keep[j / a] * a + j % a))
        };
        let bias = |b: &[T]| {
            keep.iter()
                .flat_map(|&h| b[h * a..(h + 1) * a].iter().copied())
                .collect::<Vec<_>>()
        };
        AttentionWeights {
            head_dim: a,
            query: cols(&self.query),
            query_bias: bias(&self.query_bias),
            key: cols(&self.key),
            key_bias: bias(&self.key_bias),
            value: cols(&self.value),
            value_bias: bias(&self.value_bias),
            output: Mat::from_fn(keep.len() * a, self.output.cols, |i, j| {
                self.output.at(keep[i / a] * a + i % a, j)
            }),
            output_bias: Mat::from_fn(keep.len(), self.output_bias.cols, |i, j| {
                self.output_bias.at(keep[i], j)
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForwardWeights<T> {
    /// `d x D_F`
    pub input: Mat<T>,
    pub input_bias: Vec<T>,
    /// `D_F x d`
    pub output: Mat<T>,
    pub output_bias: Vec<T>,
}

impl<T: Real> FeedForwardWeights<T> {
    pub fn width(&self) -> usize {
        self.input.cols
    }

    /// Zero input column `j` (and its bias) and output row `j`.
    pub fn zero_neuron(&mut self, j: usize) {
        for i in 0..self.input.rows {
            *self.input.at_mut(i, j) = T::zero();
        }
        self.input_bias[j] = T::zero();
        self.output.row_mut(j).fill(T::zero());
    }

    pub fn select_neurons(&self, keep: &[usize]) -> Self {
        FeedForwardWeights {
            input: Mat::from_fn(self.input.rows, keep.len(), |i, j| self.input.at(i, keep[j])),
            input_bias: keep.iter().map(|&j| self.input_bias[j]).collect(),
            output: Mat::from_fn(keep.len(), self.output.cols, |i, j| {
                self.output.at(keep[i], j)
            }),
            output_bias: self.output_bias.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights<T> {
    pub attention: AttentionWeights<T>,
    pub attention_norm: LayerNorm<T>,
    pub ffn: FeedForwardWeights<T>,
    pub ffn_norm: LayerNorm<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights<T> {
    pub token_embedding: Mat<T>,
    pub position_embedding: Mat<T>,
    pub layers: Vec<LayerWeights<T>>,
}

fn truncated_normal<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<T> {
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(T::c(z * INIT_STD));
        }
    }
    Mat::from_vec(rows, cols, data)
}

impl<T: Real> EncoderWeights<T> {
    /// Truncated normal (sigma 0.02, cut at two sigma) matrices, zero biases,
    /// unit layer-norm scales.
    pub(crate) fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let inner = config.heads_per_layer * config.head_dim;
        let token_embedding = truncated_normal(&mut rng, config.vocab_size, d);
        let position_embedding = truncated_normal(&mut rng, config.max_seq_len, d);
        let norm = || LayerNorm {
            scale: vec![T::one(); d],
            shift: vec![T::zero(); d],
        };
        let layers = (0..config.num_layers)
            .map(|_| {
                let attention = AttentionWeights {
                    head_dim: config.head_dim,
                    query: truncated_normal(&mut rng, d, inner),
                    query_bias: vec![T::zero(); inner],
                    key: truncated_normal(&mut rng, d, inner),
                    key_bias: vec![T::zero(); inner],
                    value: truncated_normal(&mut rng, d, inner),
                    value_bias: vec![T::zero(); inner],
                    output: truncated_normal(&mut rng, inner, d),
                    output_bias: Mat::zeros(config.heads_per_layer, d),
                };
                let ffn = FeedForwardWeights {
                    input: truncated_normal(&mut rng, d, config.ffn_dim),
                    input_bias: vec![T::zero(); config.ffn_dim],
                    output: truncated_normal(&mut rng, config.ffn_dim, d),
                    output_bias: vec![T::zero(); d],
                };
                LayerWeights {
                    attention,
                    attention_norm: norm(),
                    ffn,
                    ffn_norm: norm(),
                }
            })
            .collect();
        EncoderWeights {
            token_embedding,
            position_embedding,
            layers,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.token_embedding.cols
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.rows
    }

    pub fn max_seq_len(&self) -> usize {
        self.position_embedding.rows
    }

    pub fn heads_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.attention.num_heads()).collect()
    }

    pub fn neurons_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.ffn.width()).collect()
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for part in z.parts_mut() {
            part.fill(T::zero());
        }
        z
    }

    /// Every tensor with its checkpoint name and shape, in a fixed order.
    pub fn parts(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        let mat = |m: &Mat<T>| vec![m.rows, m.cols];
        out.push((
            "token_embedding".into(),
            mat(&self.token_embedding),
            &self.token_embedding.data,
        ));
        out.push((
            "position_embedding".into(),
            mat(&self.position_embedding),
            &self.position_embedding.data,
        ));
        for (l, layer) in self.layers.iter().enumerate() {
            let a = &layer.attention;
            let p = |s: &str| format!("layer.{l}.{s}");
            out.push((p("attention.query"), mat(&a.query), &a.query.data));
            out.push((p("attention.query_bias"), vec![a.query_bias.len()], &a.query_bias));
            out.push((p("attention.key"), mat(&a.key), &a.key.data));
            out.push((p("attention.key_bias"), vec![a.key_bias.len()], &a.key_bias));
            out.push((p("attention.value"), mat(&a.value), &a.value.data));
            out.push((p("attention.value_bias"), vec![a.value_bias.len()], &a.value_bias));
            out.push((p("attention.output"), mat(&a.output), &a.output.data));
            out.push((p("attention.output_bias"), mat(&a.output_bias), &a.output_bias.data));
            let n = &layer.attention_norm;
            out.push((p("attention_norm.scale"), vec![n.scale.len()], &n.scale));
            out.push((p("attention_norm.shift"), vec![n.shift.len()], &n.shift));
            let f = &layer.ffn;
            out.push((p("ffn.input"), mat(&f.input), &f.input.data));
            out.push((p("ffn.input_bias"), vec![f.input_bias.len()], &f.input_bias));
            out.push((p("ffn.output"), mat(&f.output), &f.output.data));
            out.push((p("ffn.output_bias"), vec![f.output_bias.len()], &f.output_bias));
            let n = &layer.ffn_norm;
            out.push((p("ffn_norm.scale"), vec![n.scale.len()], &n.scale));
            out.push((p("ffn_norm.shift"), vec![n.shift.len()], &n.shift));
        }
        out
    }

    /// Mutable counterpart of [`parts`](Self::parts), same order.
    pub fn parts_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            &mut self.token_embedding.data,
            &mut self.position_embedding.data,
        ];
        for layer in &mut self.layers {
            let a = &mut layer.attention;
            out.push(&mut a.query.data);
            out.push(&mut a.query_bias);
            out.push(&mut a.key.data);
            out.push(&mut a.key_bias);
            out.push(&mut a.value.data);
            out.push(&mut a.value_bias);
            out.push(&mut a.output.data);
            out.push(&mut a.output_bias.data);
            out.push(&mut layer.attention_norm.scale);
            out.push(&mut layer.attention_norm.shift);
            let f = &mut layer.ffn;
            out.push(&mut f.input.data);
            out.push(&mut f.input_bias);
            out.push(&mut f.output.data);
            out.push(&mut f.output_bias);
            out.push(&mut layer.ffn_norm.scale);
            out.push(&mut layer.ffn_norm.shift);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parts().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> EncoderWeights<U> {
        let mut out = EncoderWeights::<U> {
            token_embedding: Mat::zeros(self.token_embedding.rows, self.token_embedding.cols),
            position_embedding: Mat::zeros(
                self.position_embedding.rows,
                self.position_embedding.cols,
            ),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let a = &l.attention;
                    let z = |m: &Mat<T>| Mat::<U>::zeros(m.rows, m.cols);
                    let zv = |v: &[T]| vec![U::zero(); v.len()];
                    LayerWeights {
                        attention: AttentionWeights {
                            head_dim: a.head_dim,
                            query: z(&a.query),
                            query_bias: zv(&a.query_bias),
                            key: z(&a.key),
                            key_bias: zv(&a.key_bias),
                            value: z(&a.value),
                            value_bias: zv(&a.value_bias),
                            output: z(&a.output),
                            output_bias: z(&a.output_bias),
                        },
                        attention_norm: LayerNorm {
                            scale: zv(&l.attention_norm.scale),
                            shift: zv(&l.attention_norm.shift),
                        },
                        ffn: FeedForwardWeights {
                            input: z(&l.ffn.input),
                            input_bias: zv(&l.ffn.input_bias),
                            output: z(&l.ffn.output),
                            output_bias: zv(&l.ffn.output_bias),
                        },
                        ffn_norm: LayerNorm {
                            scale: zv(&l.ffn_norm.scale),
                            shift: zv(&l.ffn_norm.shift),
                        },
                    }
                })
                .collect(),
        };
        for (dst, (_, _, src)) in out.parts_mut().into_iter().zip(self.parts()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::c(s.f64());
            }
        }
        out
    }

    /// Rebuild from named tensors, checked against `config`.
    pub fn from_parts(config: &ModelConfig, parts: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self> {
        config.validate()?;
        let mut w = EncoderWeights::<T>::init(config);
        let expected: Vec<(String, Vec<usize>)> =
            w.parts().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != parts.len() {
            return Err(Error::Compatibility(format!(
                "expected {} weight tensors, found {}",
                expected.len(),
                parts.len()
            )));
        }
        for ((dst, (en, es)), (name, shape, data)) in
            w.parts_mut().into_iter().zip(expected).zip(parts)
        {
            if en != name || es != shape {
                return Err(Error::Compatibility(format!(
                    "tensor {name} {shape:?} does not match config (expected {en} {es:?})"
                )));
            }
            dst.copy_from_slice(&data);
        }
        Ok(w)
    }
}

/// Gate values: one per head and one per FFN neuron, per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet<T> {
    pub heads: Vec<Vec<T>>,
    pub neurons: Vec<Vec<T>>,
}

impl<T: Real> MaskSet<T> {
    pub fn ones(heads_per_layer: &[usize], neurons_per_layer: &[usize]) -> Self {
        MaskSet {
            heads: heads_per_layer.iter().map(|&n| vec![T::one(); n]).collect(),
            neurons: neurons_per_layer.iter().map(|&n| vec![T::one(); n]).collect(),
        }
    }

    pub fn ones_for(weights: &EncoderWeights<T>) -> Self {
        Self::ones(&weights.heads_per_layer(), &weights.neurons_per_layer())
    }

    pub fn ones_for_config(config: &ModelConfig) -> Self {
        Self::ones(
            &vec![config.heads_per_layer; config.num_layers],
            &vec![config.ffn_dim; config.num_layers],
        )
    }

    fn entries(&self) -> impl Iterator<Item = &T> {
        self.heads.iter().flatten().chain(self.neurons.iter().flatten())
    }

    pub fn is_all_ones(&self) -> bool {
        self.entries().all(|&x| x == T::one())
    }

    pub fn is_binary(&self) -> bool {
        self.entries().all(|&x| x == T::one() || x == T::zero())
    }

    pub fn check_against(&self, weights: &EncoderWeights<T>) -> Result<()> {
        let heads: Vec<usize> = self.heads.iter().map(Vec::len).collect();
        let neurons: Vec<usize> = self.neurons.iter().map(Vec::len).collect();
        if heads != weights.heads_per_layer() || neurons != weights.neurons_per_layer() {
            return Err(Error::Shape(format!(
                "mask shapes heads {heads:?} neurons {neurons:?} do not match model heads {:?} neurons {:?}",
                weights.heads_per_layer(),
                weights.neurons_per_layer()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> MaskSet<U> {
        let c = |v: &Vec<Vec<T>>| {
            v.iter()
                .map(|r| r.iter().map(|x| U::c(x.f64())).collect())
                .collect()
        };
        MaskSet {
            heads: c(&self.heads),
            neurons: c(&self.neurons),
        }
    }
}

/// Gradients for every weight plus every gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    pub weights: EncoderWeights<T>,
    pub head_masks: Vec<Vec<T>>,
    pub neuron_masks: Vec<Vec<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn zeros_like(weights: &EncoderWeights<T>) -> Self {
        let m = MaskSet::<T>::ones_for(weights);
        let zero = |v: Vec<Vec<T>>| {
            v.into_iter()
                .map(|r| vec![T::zero(); r.len()])
                .collect::<Vec<_>>()
        };
        GradientSet {
            weights: weights.zeros_like(),
            head_masks: zero(m.heads),
            neuron_masks: zero(m.neurons),
        }
    }

    /// `self += other`, element by element in a fixed order.
    pub fn accumulate(&mut self, other: &GradientSet<T>) {
        for (d, (_, _, s)) in self.weights.parts_mut().into_iter().zip(other.weights.parts()) {
            for (x, y) in d.iter_mut().zip(s) {
                *x += *y;
            }
        }
        for (d, s) in self
            .head_masks
            .iter_mut()
            .chain(self.neuron_masks.iter_mut())
            .zip(other.head_masks.iter().chain(other.neuron_masks.iter()))
        {
            for (x, y) in d.iter_mut().zip(s) {
                *x += *y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite()
            && self
                .head_masks
                .iter()
                .chain(&self.neuron_masks)
                .flatten()
                .all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            max_seq_len: 6,
            hidden_dim: 8,
            num_layers: 2,
            heads_per_layer: 2,
            head_dim: 4,
            ffn_dim: 5,
            dropout_rate: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn parts_and_parts_mut_agree() {
        let mut w = EncoderWeights::<f32>::init(&cfg());
        let lens: Vec<usize> = w.parts().iter().map(|(_, _, d)| d.len()).collect();
        let shapes: Vec<usize> = w
            .parts()
            .iter()
            .map(|(_, s, _)| s.iter().product())
            .collect();
        assert_eq!(lens, shapes);
        let mut_lens: Vec<usize> = w.parts_mut().iter().map(|d| d.len()).collect();
        assert_eq!(lens, mut_lens);
    }

    #[test]
    fn from_parts_round_trip_and_mismatch() {
        let w = EncoderWeights::<f32>::init(&cfg());
        let parts: Vec<_> = w
            .parts()
            .into_iter()
            .map(|(n, s, d)| (n, s, d.to_vec()))
            .collect();
        assert_eq!(EncoderWeights::from_parts(&cfg(), parts.clone()).unwrap(), w);
        let mut bad = cfg();
        bad.ffn_dim = 6;
        assert!(matches!(
            EncoderWeights::from_parts(&bad, parts),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn select_heads_keeps_blocks() {
        let w = EncoderWeights::<f64>::init(&cfg());
        let a = &w.layers[0].attention;
        let s = a.select_heads(&[1]);
        assert_eq!(s.num_heads(), 1);
        assert_eq!(s.head_query(0), a.head_query(1));
        assert_eq!(s.head_output(0), a.head_output(1));
    }
}
