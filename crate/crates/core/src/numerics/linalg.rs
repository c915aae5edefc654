//! Matrix products over row-major slices.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{check_finite, Tensor};

/// Dot product with eight independent accumulators so the loop vectorizes.
/// The reduction order is fixed, so results are deterministic.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let split = n - n % 8;
    let mut acc = [T::zero(); 8];
    for (ca, cb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for i in split..n {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Rows of `c` are processed four at a time so each row of `b` is loaded
/// once per tile; every entry still accumulates over `k` in order.
pub fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let tiles = m / 4;
    for t in 0..tiles {
        let i = 4 * t;
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for kk in 0..k {
            let br = &b[kk * n..(kk + 1) * n];
            let (a0, a1, a2, a3) = (
                a[i * k + kk],
                a[(i + 1) * k + kk],
                a[(i + 2) * k + kk],
                a[(i + 3) * k + kk],
            );
            for j in 0..n {
                let bv = br[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
    }
    for i in 4 * tiles..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(aik, &b[kk * n..(kk + 1) * n], c_row);
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_a_bt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
///
/// Four rows of `c` share each loaded row of `b`; every entry accumulates
/// over `m` in order.
pub fn gemm_at_b_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let tiles = k / 4;
    for t in 0..tiles {
        let kk = 4 * t;
        let (c0, rest) = c[kk * n..(kk + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for i in 0..m {
            let br = &b[i * n..(i + 1) * n];
            let ar = &a[i * k + kk..i * k + kk + 4];
            let (a0, a1, a2, a3) = (ar[0], ar[1], ar[2], ar[3]);
            for j in 0..n {
                let bv = br[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
    }
    for kk in 4 * tiles..k {
        let c_row = &mut c[kk * n..(kk + 1) * n];
        for i in 0..m {
            axpy(a[i * k + kk], &b[i * n..(i + 1) * n], c_row);
        }
    }
}

fn matmul_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if b.rank() != 2 || a.last_dim() != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Ok((a.rows(), b.shape()[0], b.shape()[1]))
}

/// `a[..×k] · b[k×n] → [..×n]`; leading axes of `a` are treated as rows.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a, b)?;
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    let mut c = Tensor::zeros(&shape);
    gemm_acc(a.data(), b.data(), c.data_mut(), m, k, n);
    check_finite("matmul", c.data())?;
    Ok(c)
}

/// Returns `(dA, dB)` for `C = A·B` given `dC`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k, n) = matmul_dims(a, b)?;
    if dc.rows() != m || dc.last_dim() != n {
        return Err(Error::shape("matmul_backward", dc.shape(), &[m, n]));
    }
    let mut da = Tensor::zeros(a.shape());
    gemm_a_bt_acc(dc.data(), b.data(), da.data_mut(), m, n, k);
    let mut db = Tensor::zeros(b.shape());
    gemm_at_b_acc(a.data(), dc.data(), db.data_mut(), m, k, n);
    Ok((da, db))
}
