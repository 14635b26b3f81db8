//! Dense row-major matrices and the scalar trait the encoder is generic over.
//!
//! Storage is `f32` throughout the pipeline; `f64` instantiations exist so
//! gradient checks can run with a tighter finite-difference oracle.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn erf(self) -> Self;

    /// Lossy conversion from an `f64` literal.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("real value")
    }

    /// `C = alpha * A B + beta * C` on strided views.
    ///
    /// # Safety
    /// Every index reachable through the given strides must be in bounds of
    /// the corresponding pointer's allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn view(&self) -> View<'_, T> {
        View {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn view_mut(&mut self) -> ViewMut<'_, T> {
        ViewMut {
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
            data: &mut self.data,
        }
    }

    /// Rows `[start, start + len)` as a view.
    pub fn rows_view(&self, start: usize, len: usize) -> View<'_, T> {
        self.block(start, len, 0, self.cols)
    }

    pub fn block(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> View<'_, T> {
        assert!(r0 + nr <= self.rows && c0 + nc <= self.cols, "block out of range");
        let off = r0 * self.cols + c0;
        View {
            data: &self.data[off..],
            rows: nr,
            cols: nc,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn block_mut(&mut self, r0: usize, nr: usize, c0: usize, nc: usize) -> ViewMut<'_, T> {
        assert!(r0 + nr <= self.rows && c0 + nc <= self.cols, "block out of range");
        let off = r0 * self.cols + c0;
        let cols = self.cols;
        ViewMut {
            data: &mut self.data[off..],
            rows: nr,
            cols: nc,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Mat<T>) -> T {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::c(x.f64())).collect(),
        }
    }
}

/// Borrowed strided matrix.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T: Real> View<'a, T> {
    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs;
            assert!((last as usize) < self.data.len(), "view exceeds storage");
        }
    }
}

/// Mutable strided matrix.
pub struct ViewMut<'a, T> {
    data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T: Real> ViewMut<'a, T> {
    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs;
            assert!((last as usize) < self.data.len(), "view exceeds storage");
        }
    }
}

/// `c = alpha * a b + beta * c`.
pub fn gemm<T: Real>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape");
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked against their slices above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            c.rs,
            c.cs,
        );
    }
}

/// Fresh `a b`.
pub fn matmul<T: Real>(a: View<'_, T>, b: View<'_, T>) -> Mat<T> {
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(T::one(), a, b, T::zero(), out.view_mut());
    out
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        Mat::from_fn(a.rows, b.cols, |i, j| (0..a.cols).map(|k| a.at(i, k) * b.at(k, j)).sum())
    }

    #[test]
    fn gemm_matches_naive_with_transposes_and_blocks() {
        let a = Mat::from_fn(5, 7, |i, j| (i * 7 + j) as f64 * 0.1 - 1.0);
        let b = Mat::from_fn(7, 3, |i, j| ((i + 2 * j) % 5) as f64 - 2.0);
        assert_eq!(matmul(a.view(), b.view()), naive(&a, &b));

        let at = Mat::from_fn(7, 5, |i, j| a.at(j, i));
        assert_eq!(matmul(at.view().t(), b.view()), naive(&a, &b));

        // Column block of b.
        let blk = matmul(a.view(), b.block(0, 7, 1, 2));
        let full = naive(&a, &b);
        for i in 0..5 {
            for j in 0..2 {
                assert_eq!(blk.at(i, j), full.at(i, j + 1));
            }
        }
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = Mat::from_fn(2, 2, |i, j| (i + j) as f32);
        let mut c = Mat::from_fn(2, 2, |_, _| 1.0f32);
        gemm(2.0, a.view(), a.view(), 1.0, c.view_mut());
        // a*a = [[1,2],[2,5]]
        assert_eq!(c.data, vec![3.0, 5.0, 5.0, 11.0]);
    }
}
