use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Rotates consecutive pairs `(2k, 2k+1)` of every head vector by
/// `pos · theta_base^(−2k/d)`. `x` is `[L × h × d]`.
pub fn rope_apply<T: Real>(
    x: &Tensor<T>,
    positions: &[usize],
    theta_base: f64,
) -> Result<Tensor<T>> {
    rotate(x, positions, theta_base, false)
}

/// Adjoint of [`rope_apply`] (rotation by the negated angle).
pub fn rope_backward<T: Real>(
    dy: &Tensor<T>,
    positions: &[usize],
    theta_base: f64,
) -> Result<Tensor<T>> {
    rotate(dy, positions, theta_base, true)
}

fn rotate<T: Real>(
    x: &Tensor<T>,
    positions: &[usize],
    theta_base: f64,
    inverse: bool,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || x.shape()[0] != positions.len() {
        return Err(Error::shape("rope_apply", x.shape(), &[positions.len()]));
    }
    let d = x.shape()[2];
    if d % 2 != 0 {
        return Err(Error::invalid("rope_apply", "head dimension must be even"));
    }
    let mut y = x.clone();
    let heads = x.shape()[1];
    for (i, &pos) in positions.iter().enumerate() {
        for h in 0..heads {
            rotate_row(y.row_mut(i * heads + h), pos, theta_base, inverse);
        }
    }
    Ok(y)
}

/// In-place rotation of one head vector.
#[inline]
pub fn rotate_row<T: Real>(row: &mut [T], pos: usize, theta_base: f64, inverse: bool) {
    let d = row.len();
    for k in 0..d / 2 {
        let freq = num_traits::Float::powf(theta_base, -2.0 * k as f64 / d as f64);
        let mut angle = pos as f64 * freq;
        if inverse {
            angle = -angle;
        }
        let (s, c) = (
            T::lit(num_traits::Float::sin(angle)),
            T::lit(num_traits::Float::cos(angle)),
        );
        let (a, b) = (row[2 * k], row[2 * k + 1]);
        row[2 * k] = a * c - b * s;
        row[2 * k + 1] = a * s + b * c;
    }
}
