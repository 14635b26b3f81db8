//! Forward and backward kernels for the masked attention block, the masked
//! feed-forward block and layer norm. Tokens of all sentences in a batch are
//! stacked row-wise; attention runs within each sentence's row segment.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::weights::{AttentionWeights, FeedForwardWeights, LayerNorm};
use super::LAYER_NORM_EPS;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Real};

/// `(first_row, len)` of each sentence in the stacked token matrix.
pub(crate) type Segments = [(usize, usize)];

pub(crate) struct DropoutStream<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub rate: f64,
}

impl DropoutStream<'_> {
    /// Inverted-dropout multipliers: 0 with probability `rate`, else `1 / (1 - rate)`.
    fn multipliers<T: Real>(&mut self, n: usize) -> Vec<T> {
        let keep = T::c(1.0 / (1.0 - self.rate));
        (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect()
    }
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<T: Real>(x: T) -> T {
    T::c(0.5) * x * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-x * x * T::c(0.5)).exp() * T::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn add_row_bias<T: Real>(m: &mut Mat<T>, bias: &[T]) {
    for i in 0..m.rows {
        for (x, b) in m.row_mut(i).iter_mut().zip(bias) {
            *x += *b;
        }
    }
}

fn add_col_sums<T: Real>(acc: &mut [T], m: &Mat<T>) {
    for i in 0..m.rows {
        for (a, x) in acc.iter_mut().zip(m.row(i)) {
            *a += *x;
        }
    }
}

fn project<T: Real>(x: &Mat<T>, w: &Mat<T>, b: &[T]) -> Mat<T> {
    let mut out = Mat::zeros(x.rows, w.cols);
    gemm(T::one(), x.view(), w.view(), T::zero(), out.view_mut());
    add_row_bias(&mut out, b);
    out
}

pub(crate) struct AttentionCache<T> {
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Softmax probabilities, per sentence then per head, `len x len` each.
    probs: Vec<T>,
    dropout: Option<Vec<T>>,
    /// Concatenated per-head context vectors before gating.
    ctx: Mat<T>,
}

fn prob_offsets(seg: &Segments, heads: usize) -> Vec<usize> {
    let mut offs = Vec::with_capacity(seg.len());
    let mut acc = 0;
    for &(_, len) in seg {
        offs.push(acc);
        acc += heads * len * len;
    }
    offs
}

pub(crate) fn attention_forward<T: Real>(
    x: &Mat<T>,
    seg: &Segments,
    w: &AttentionWeights<T>,
    gates: &[T],
    mut dropout: Option<DropoutStream<'_>>,
) -> (Mat<T>, AttentionCache<T>) {
    let heads = w.num_heads();
    let a = w.head_dim;
    let q = project(x, &w.query, &w.query_bias);
    let k = project(x, &w.key, &w.key_bias);
    let v = project(x, &w.value, &w.value_bias);
    let scale = T::c(1.0 / (a as f64).sqrt());
    let offs = prob_offsets(seg, heads);
    let total: usize = seg.iter().map(|&(_, l)| heads * l * l).sum();
    let mut probs = vec![T::zero(); total];
    let drop = dropout.as_mut().map(|d| d.multipliers::<T>(total));
    let mut ctx = Mat::zeros(x.rows, heads * a);

    for (s, &(r0, len)) in seg.iter().enumerate() {
        for h in 0..heads {
            let base = offs[s] + h * len * len;
            let c0 = h * a;
            for i in 0..len {
                let qi = &q.row(r0 + i)[c0..c0 + a];
                let row = &mut probs[base + i * len..base + (i + 1) * len];
                let mut max = T::neg_infinity();
                for (j, p) in row.iter_mut().enumerate() {
                    let kj = &k.row(r0 + j)[c0..c0 + a];
                    let sc = qi.iter().zip(kj).map(|(x, y)| *x * *y).sum::<T>() * scale;
                    *p = sc;
                    max = max.max(sc);
                }
                let mut z = T::zero();
                for p in row.iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                for p in row.iter_mut() {
                    *p /= z;
                }
                let out = &mut ctx.row_mut(r0 + i)[c0..c0 + a];
                for j in 0..len {
                    let mut pij = probs[base + i * len + j];
                    if let Some(m) = &drop {
                        pij *= m[base + i * len + j];
                    }
                    if pij != T::zero() {
                        let vj = &v.row(r0 + j)[c0..c0 + a];
                        for (o, vv) in out.iter_mut().zip(vj) {
                            *o += pij * *vv;
                        }
                    }
                }
            }
        }
    }

    let mut gated = ctx.clone();
    for i in 0..gated.rows {
        let row = gated.row_mut(i);
        for (h, g) in gates.iter().enumerate() {
            row[h * a..(h + 1) * a].iter_mut().for_each(|x| *x *= *g);
        }
    }
    let mut out = Mat::zeros(x.rows, w.output.cols);
    gemm(T::one(), gated.view(), w.output.view(), T::zero(), out.view_mut());
    let mut bias = vec![T::zero(); w.output.cols];
    for (h, g) in gates.iter().enumerate() {
        for (b, o) in bias.iter_mut().zip(w.output_bias.row(h)) {
            *b += *g * *o;
        }
    }
    add_row_bias(&mut out, &bias);

    (
        out,
        AttentionCache {
            q,
            k,
            v,
            probs,
            dropout: drop,
            ctx,
        },
    )
}

/// Accumulates weight and gate gradients; returns the gradient w.r.t. `x`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    x: &Mat<T>,
    seg: &Segments,
    w: &AttentionWeights<T>,
    gates: &[T],
    cache: &AttentionCache<T>,
    d_out: &Mat<T>,
    grad: &mut AttentionWeights<T>,
    grad_gates: &mut [T],
) -> Mat<T> {
    let heads = w.num_heads();
    let a = w.head_dim;
    let rows = x.rows;

    // Output projection and gates.
    let mut d_ctx = Mat::zeros(rows, heads * a);
    gemm(T::one(), d_out.view(), w.output.view().t(), T::zero(), d_ctx.view_mut());
    let mut gated = cache.ctx.clone();
    for i in 0..rows {
        let row = gated.row_mut(i);
        for (h, g) in gates.iter().enumerate() {
            row[h * a..(h + 1) * a].iter_mut().for_each(|x| *x *= *g);
        }
    }
    gemm(T::one(), gated.view().t(), d_out.view(), T::one(), grad.output.view_mut());
    let mut out_sum = vec![T::zero(); w.output.cols];
    add_col_sums(&mut out_sum, d_out);
    for h in 0..heads {
        let mut gg = dotrow(&out_sum, w.output_bias.row(h));
        for i in 0..rows {
            gg += dotrow(&d_ctx.row(i)[h * a..(h + 1) * a], &cache.ctx.row(i)[h * a..(h + 1) * a]);
        }
        grad_gates[h] += gg;
        for (gb, s) in grad.output_bias.row_mut(h).iter_mut().zip(&out_sum) {
            *gb += gates[h] * *s;
        }
    }
    for i in 0..rows {
        let row = d_ctx.row_mut(i);
        for (h, g) in gates.iter().enumerate() {
            row[h * a..(h + 1) * a].iter_mut().for_each(|x| *x *= *g);
        }
    }

    // Scaled dot-product attention, per sentence and head.
    let scale = T::c(1.0 / (a as f64).sqrt());
    let offs = prob_offsets(seg, heads);
    let mut dq = Mat::zeros(rows, heads * a);
    let mut dk = Mat::zeros(rows, heads * a);
    let mut dv = Mat::zeros(rows, heads * a);
    let mut dp = Vec::new();
    for (s, &(r0, len)) in seg.iter().enumerate() {
        for h in 0..heads {
            let base = offs[s] + h * len * len;
            let c0 = h * a;
            let p = &cache.probs[base..base + len * len];
            let m = cache.dropout.as_ref().map(|m| &m[base..base + len * len]);
            dp.clear();
            dp.resize(len * len, T::zero());
            for i in 0..len {
                let dci = &d_ctx.row(r0 + i)[c0..c0 + a];
                for j in 0..len {
                    let vj = &cache.v.row(r0 + j)[c0..c0 + a];
                    let mut dpij = dotrow(dci, vj);
                    let mut pij = p[i * len + j];
                    if let Some(m) = m {
                        dpij *= m[i * len + j];
                        pij *= m[i * len + j];
                    }
                    dp[i * len + j] = dpij;
                    if pij != T::zero() {
                        let dvj = &mut dv.row_mut(r0 + j)[c0..c0 + a];
                        for (d, c) in dvj.iter_mut().zip(dci) {
                            *d += pij * *c;
                        }
                    }
                }
            }
            for i in 0..len {
                let pr = &p[i * len..(i + 1) * len];
                let dr = &mut dp[i * len..(i + 1) * len];
                let inner = dotrow(pr, dr);
                for (d, pp) in dr.iter_mut().zip(pr) {
                    *d = *pp * (*d - inner) * scale;
                }
            }
            for i in 0..len {
                for j in 0..len {
                    let ds = dp[i * len + j];
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..a {
                        let kj = cache.k.at(r0 + j, c0 + c);
                        let qi = cache.q.at(r0 + i, c0 + c);
                        *dq.at_mut(r0 + i, c0 + c) += ds * kj;
                        *dk.at_mut(r0 + j, c0 + c) += ds * qi;
                    }
                }
            }
        }
    }

    let mut dx = Mat::zeros(rows, x.cols);
    for (dm, wm, gw, gb) in [
        (&dq, &w.query, &mut grad.query, &mut grad.query_bias),
        (&dk, &w.key, &mut grad.key, &mut grad.key_bias),
        (&dv, &w.value, &mut grad.value, &mut grad.value_bias),
    ] {
        gemm(T::one(), x.view().t(), dm.view(), T::one(), gw.view_mut());
        add_col_sums(gb, dm);
        gemm(T::one(), dm.view(), wm.view().t(), T::one(), dx.view_mut());
    }
    dx
}

#[inline]
fn dotrow<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub(crate) struct FfnCache<T> {
    pre: Mat<T>,
    /// GELU output after dropout, before gating.
    act: Mat<T>,
    dropout: Option<Vec<T>>,
}

pub(crate) fn ffn_forward<T: Real>(
    y: &Mat<T>,
    w: &FeedForwardWeights<T>,
    gates: &[T],
    dropout: Option<DropoutStream<'_>>,
) -> (Mat<T>, FfnCache<T>) {
    let pre = project(y, &w.input, &w.input_bias);
    let mut act = Mat::from_vec(pre.rows, pre.cols, pre.data.iter().map(|&u| gelu(u)).collect());
    let drop = dropout.map(|mut d| d.multipliers::<T>(act.data.len()));
    if let Some(m) = &drop {
        act.data.iter_mut().zip(m).for_each(|(x, k)| *x *= *k);
    }
    let mut gated = act.clone();
    for i in 0..gated.rows {
        gated.row_mut(i).iter_mut().zip(gates).for_each(|(x, g)| *x *= *g);
    }
    let out = project(&gated, &w.output, &w.output_bias);
    (
        out,
        FfnCache {
            pre,
            act,
            dropout: drop,
        },
    )
}

pub(crate) fn ffn_backward<T: Real>(
    y: &Mat<T>,
    w: &FeedForwardWeights<T>,
    gates: &[T],
    cache: &FfnCache<T>,
    d_out: &Mat<T>,
    grad: &mut FeedForwardWeights<T>,
    grad_gates: &mut [T],
) -> Mat<T> {
    let rows = y.rows;
    let width = w.width();
    let mut gated = cache.act.clone();
    for i in 0..rows {
        gated.row_mut(i).iter_mut().zip(gates).for_each(|(x, g)| *x *= *g);
    }
    gemm(T::one(), gated.view().t(), d_out.view(), T::one(), grad.output.view_mut());
    add_col_sums(&mut grad.output_bias, d_out);

    let mut d_gated = Mat::zeros(rows, width);
    gemm(T::one(), d_out.view(), w.output.view().t(), T::zero(), d_gated.view_mut());
    for i in 0..rows {
        for (gg, (d, x)) in grad_gates
            .iter_mut()
            .zip(d_gated.row(i).iter().zip(cache.act.row(i)))
        {
            *gg += *d * *x;
        }
    }
    // d_gated becomes d(pre-activation).
    for i in 0..rows {
        let pre = cache.pre.row(i);
        let drop = cache.dropout.as_ref().map(|m| &m[i * width..(i + 1) * width]);
        for (j, d) in d_gated.row_mut(i).iter_mut().enumerate() {
            let mut v = *d * gates[j];
            if let Some(m) = drop {
                v *= m[j];
            }
            *d = if v == T::zero() { v } else { v * gelu_grad(pre[j]) };
        }
    }
    gemm(T::one(), y.view().t(), d_gated.view(), T::one(), grad.input.view_mut());
    add_col_sums(&mut grad.input_bias, &d_gated);
    let mut dy = Mat::zeros(rows, y.cols);
    gemm(T::one(), d_gated.view(), w.input.view().t(), T::zero(), dy.view_mut());
    dy
}

pub(crate) struct NormCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Real>(x: &Mat<T>, ln: &LayerNorm<T>) -> (Mat<T>, NormCache<T>) {
    let n = T::c(x.cols as f64);
    let eps = T::c(LAYER_NORM_EPS);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (*v - mean) * r;
        }
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = ln.scale[j] * xhat.at(i, j) + ln.shift[j];
        }
    }
    (out, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<T: Real>(
    ln: &LayerNorm<T>,
    cache: &NormCache<T>,
    dy: &Mat<T>,
    grad: &mut LayerNorm<T>,
) -> Mat<T> {
    let cols = dy.cols;
    let n = T::c(cols as f64);
    let mut dx = Mat::zeros(dy.rows, cols);
    let mut dxhat = vec![T::zero(); cols];
    for i in 0..dy.rows {
        let xh = cache.xhat.row(i);
        let d = dy.row(i);
        for j in 0..cols {
            grad.scale[j] += d[j] * xh[j];
            grad.shift[j] += d[j];
            dxhat[j] = d[j] * ln.scale[j];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / n;
        let mean_dx = dotrow(&dxhat, xh) / n;
        let r = cache.rstd[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

/// Gated multi-head attention on one sequence `x` (`len x d`):
/// `sum_i gate_i * (softmax(Q_i K_i^T / sqrt(d_A)) V_i W_O^i + b_O^i)`.
pub fn masked_mha<T: Real>(x: &Mat<T>, w: &AttentionWeights<T>, head_masks: &[T]) -> Result<Mat<T>> {
    if x.cols != w.query.rows {
        return Err(Error::Shape(format!(
            "input width {} != model width {}",
            x.cols, w.query.rows
        )));
    }
    if head_masks.len() != w.num_heads() {
        return Err(Error::Shape(format!(
            "{} head masks for {} heads",
            head_masks.len(),
            w.num_heads()
        )));
    }
    Ok(attention_forward(x, &[(0, x.rows)], w, head_masks, None).0)
}

/// Gated feed-forward block: `(GELU(a W_1 + b_1) * nu) W_2 + b_2`.
pub fn masked_ffn<T: Real>(a: &Mat<T>, w: &FeedForwardWeights<T>, neuron_masks: &[T]) -> Result<Mat<T>> {
    if a.cols != w.input.rows {
        return Err(Error::Shape(format!(
            "input width {} != model width {}",
            a.cols, w.input.rows
        )));
    }
    if neuron_masks.len() != w.width() {
        return Err(Error::Shape(format!(
            "{} neuron masks for {} neurons",
            neuron_masks.len(),
            w.width()
        )));
    }
    Ok(ffn_forward(a, w, neuron_masks, None).0)
}
