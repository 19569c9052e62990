//! Row-major matrix products used by the convolution kernels. Every output
//! element is reduced in a fixed order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use super::Real;

const LANES: usize = 8;

/// Dot product with eight independent partial sums.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

#[inline]
pub fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (v, &u) in y.iter_mut().zip(x) {
        *v += a * u;
    }
}

/// `y += a0*x0 + a1*x1 + a2*x2 + a3*x3`.
#[inline]
fn axpy4<T: Real>(y: &mut [T], a: [T; 4], x: [&[T]; 4]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for i in 0..n {
        y[i] += a[0] * x0[i] + a[1] * x1[i] + a[2] * x2[i] + a[3] * x3[i];
    }
}

/// Accumulates `sum_k coef(k) * row(k)` into `y`, four rows at a time.
#[inline]
fn combine_rows<'a, T: Real + 'a>(y: &mut [T], k: usize, coef: impl Fn(usize) -> T, row: impl Fn(usize) -> &'a [T]) {
    let mut kk = 0;
    while kk + 4 <= k {
        axpy4(
            y,
            [coef(kk), coef(kk + 1), coef(kk + 2), coef(kk + 3)],
            [row(kk), row(kk + 1), row(kk + 2), row(kk + 3)],
        );
        kk += 4;
    }
    while kk < k {
        axpy(y, coef(kk), row(kk));
        kk += 1;
    }
}

/// `c (m x n) += a (m x k) * b (k x n)`.
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    c[..m * n].par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let ar = &a[i * k..][..k];
        combine_rows(row, k, |kk| ar[kk], |kk| &b[kk * n..][..n]);
    });
}

/// `c (m x n) += a^T * b` with `a` stored `k x m` and `b` stored `k x n`.
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    c[..m * n].par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        combine_rows(row, k, |kk| a[kk * m + i], |kk| &b[kk * n..][..n]);
    });
}

/// `c (m x n) += a * b^T` with `a` stored `m x k` and `b` stored `n x k`.
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    c[..m * n].par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let ar = &a[i * k..][..k];
        for (j, v) in row.iter_mut().enumerate() {
            *v += dot(ar, &b[j * k..][..k]);
        }
    });
}
