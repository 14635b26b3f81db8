use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Mat, Real};

/// `u . v / (|u| |v|)`.
pub fn cosine_sim<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).max(-T::one()).min(T::one()))
}

/// Rows scaled to unit norm, with the norms kept for backpropagation.
pub(crate) fn normalize_rows<T: Real>(h: &Mat<T>) -> Result<(Mat<T>, Vec<T>)> {
    let mut out = h.clone();
    let mut norms = Vec::with_capacity(h.rows);
    for i in 0..h.rows {
        let n = norm(h.row(i));
        if n == T::zero() || !n.is_finite() {
            return Err(Error::Numeric(format!("embedding row {i} has norm {n:?}")));
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pull a gradient w.r.t. unit rows back to the raw rows.
pub(crate) fn normalize_rows_backward<T: Real>(unit: &Mat<T>, norms: &[T], d_unit: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(unit.rows, unit.cols);
    for i in 0..unit.rows {
        let u = unit.row(i);
        let du = d_unit.row(i);
        let proj = dot(u, du);
        for ((o, a), b) in out.row_mut(i).iter_mut().zip(du).zip(u) {
            *o = (*a - *b * proj) / norms[i];
        }
    }
    out
}

fn check_pair<T: Real>(h: &Mat<T>, hp: &Mat<T>) -> Result<()> {
    if (h.rows, h.cols) != (hp.rows, hp.cols) {
        return Err(Error::Shape(format!(
            "embedding matrices {}x{} and {}x{}",
            h.rows, h.cols, hp.rows, hp.cols
        )));
    }
    if h.rows == 0 {
        return Err(Error::Input("empty embedding batch".into()));
    }
    Ok(())
}

/// `log sum_j exp(row_j)` as `max + ln_1p(sum over the rest)`.
fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let (arg, max) = row
        .iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
    let rest: T = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != arg)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + rest.ln_1p()
}

/// In-batch InfoNCE over cosine similarities, averaged over rows, with its
/// gradient w.r.t. both raw embedding matrices.
pub fn contrastive_loss_grad<T: Real>(h: &Mat<T>, hp: &Mat<T>, tau: T) -> Result<(T, Mat<T>, Mat<T>)> {
    check_pair(h, hp)?;
    if tau <= T::zero() {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let n = h.rows;
    let (u, nu) = normalize_rows(h)?;
    let (v, nv) = normalize_rows(hp)?;
    let mut logits = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            *logits.at_mut(i, j) = dot(u.row(i), v.row(j)) / tau;
        }
    }
    let nf = T::c(n as f64);
    let mut loss = T::zero();
    let mut d_logits = Mat::zeros(n, n);
    for i in 0..n {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        loss += lse - row[i];
        for j in 0..n {
            let p = (row[j] - lse).exp();
            let delta = if i == j { T::one() } else { T::zero() };
            *d_logits.at_mut(i, j) = (p - delta) / nf;
        }
    }
    let mut du = Mat::zeros(n, h.cols);
    let mut dv = Mat::zeros(n, h.cols);
    for i in 0..n {
        for j in 0..n {
            let g = d_logits.at(i, j) / tau;
            for c in 0..h.cols {
                *du.at_mut(i, c) += g * v.at(j, c);
                *dv.at_mut(j, c) += g * u.at(i, c);
            }
        }
    }
    Ok((
        loss / nf,
        normalize_rows_backward(&u, &nu, &du),
        normalize_rows_backward(&v, &nv, &dv),
    ))
}

pub fn contrastive_loss<T: Real>(h: &Mat<T>, hp: &Mat<T>, tau: T) -> Result<T> {
    Ok(contrastive_loss_grad(h, hp, tau)?.0)
}
