use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{check_finite, Tensor};

/// `y = x / sqrt(mean(x²) + eps) ⊙ gamma` over the last axis.
pub fn rmsnorm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gamma.len() != d {
        return Err(Error::shape("rmsnorm", x.shape(), gamma.shape()));
    }
    let mut y = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        rmsnorm_row(x.row(r), gamma.data(), eps, y.row_mut(r));
    }
    check_finite("rmsnorm", y.data())?;
    Ok(y)
}

/// Returns the inverse RMS so callers can cache it.
#[inline]
pub fn rmsnorm_row<T: Real>(x: &[T], gamma: &[T], eps: T, y: &mut [T]) -> T {
    let d = T::from_usize(x.len());
    let ms = x.iter().map(|&v| v * v).sum::<T>() / d;
    let inv = T::one() / (ms + eps).sqrt();
    for ((yi, &xi), &g) in y.iter_mut().zip(x).zip(gamma) {
        *yi = xi * inv * g;
    }
    inv
}

/// Accumulates `dx` and `dgamma` for one row.
#[inline]
pub fn rmsnorm_row_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    inv: T,
    dy: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
) {
    let d = T::from_usize(x.len());
    let mut proj = T::zero();
    for i in 0..x.len() {
        dgamma[i] += dy[i] * x[i] * inv;
        proj += dy[i] * gamma[i] * x[i];
    }
    let coef = proj * inv * inv * inv / d;
    for i in 0..x.len() {
        dx[i] += dy[i] * gamma[i] * inv - x[i] * coef;
    }
}

/// Returns `(dx, dgamma)`.
pub fn rmsnorm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if gamma.len() != x.last_dim() || dy.shape() != x.shape() {
        return Err(Error::shape("rmsnorm_backward", x.shape(), dy.shape()));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(gamma.shape());
    let d = T::from_usize(x.last_dim());
    for r in 0..x.rows() {
        let xs = x.row(r);
        let ms = xs.iter().map(|&v| v * v).sum::<T>() / d;
        let inv = T::one() / (ms + eps).sqrt();
        rmsnorm_row_backward(
            xs,
            gamma.data(),
            inv,
            dy.row(r),
            dx.row_mut(r),
            dgamma.data_mut(),
        );
    }
    Ok((dx, dgamma))
}

/// `y = x / (‖x‖₂ + eps)`; returns the norm.
#[inline]
pub fn l2_normalize_row<T: Real>(x: &[T], eps: T, y: &mut [T]) -> T {
    let n = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let inv = T::one() / (n + eps);
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = xi * inv;
    }
    n
}

#[inline]
pub fn l2_normalize_row_backward<T: Real>(x: &[T], norm: T, eps: T, dy: &[T], dx: &mut [T]) {
    let s = norm + eps;
    let inv = T::one() / s;
    if norm == T::zero() {
        for (g, &d) in dx.iter_mut().zip(dy) {
            *g += d * inv;
        }
        return;
    }
    let proj: T = x.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    let coef = proj / (s * s * norm);
    for i in 0..x.len() {
        dx[i] += dy[i] * inv - x[i] * coef;
    }
}

pub fn l2_normalize<T: Real>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let mut y = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        l2_normalize_row(x.row(r), eps, y.row_mut(r));
    }
    check_finite("l2_normalize", y.data())?;
    Ok(y)
}

pub fn l2_normalize_backward<T: Real>(x: &Tensor<T>, eps: T, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.shape() != x.shape() {
        return Err(Error::shape("l2_normalize_backward", x.shape(), dy.shape()));
    }
    let mut dx = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let xs = x.row(r);
        let n = xs.iter().map(|&v| v * v).sum::<T>().sqrt();
        l2_normalize_row_backward(xs, n, eps, dy.row(r), dx.row_mut(r));
    }
    Ok(dx)
}
