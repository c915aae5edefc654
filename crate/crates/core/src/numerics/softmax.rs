use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{check_finite, Tensor};

/// Row-wise softmax over visible entries; hidden entries come out exactly 0.
///
/// `visible` has one flag per element of `x`.
pub fn softmax_row<T: Real>(x: &Tensor<T>, visible: &[bool]) -> Result<Tensor<T>> {
    if visible.len() != x.len() {
        return Err(Error::shape("softmax_row", x.shape(), &[visible.len()]));
    }
    let n = x.last_dim();
    let mut y = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let xs = x.row(r);
        let vis = &visible[r * n..(r + 1) * n];
        let mut max = T::neg_infinity();
        for (&v, &ok) in xs.iter().zip(vis) {
            if ok && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::EmptyRow {
                op: "softmax_row",
                row: r,
            });
        }
        let ys = y.row_mut(r);
        let mut z = T::zero();
        for j in 0..n {
            if vis[j] {
                ys[j] = (xs[j] - max).exp();
                z += ys[j];
            }
        }
        let inv = T::one() / z;
        for v in ys.iter_mut() {
            *v *= inv;
        }
    }
    check_finite("softmax_row", y.data())?;
    Ok(y)
}

/// Gradient of [`softmax_row`] from its output `y` and cotangent `dy`.
pub fn softmax_row_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != dy.shape() {
        return Err(Error::shape("softmax_row_backward", y.shape(), dy.shape()));
    }
    let mut dx = Tensor::zeros(y.shape());
    for r in 0..y.rows() {
        let (ys, dys) = (y.row(r), dy.row(r));
        let inner: T = ys.iter().zip(dys).map(|(&a, &b)| a * b).sum();
        for ((g, &p), &d) in dx.row_mut(r).iter_mut().zip(ys).zip(dys) {
            *g = p * (d - inner);
        }
    }
    Ok(dx)
}
