use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{check_finite, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Softplus,
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => silu(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative at input `x`.
    #[inline]
    pub fn grad<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => silu_grad(x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

pub fn activation<T: Real>(kind: Activation, x: &Tensor<T>) -> Result<Tensor<T>> {
    let y = x.map(|v| kind.apply(v));
    check_finite("activation", y.data())?;
    Ok(y)
}

/// Gradient given the activation's input `x`.
pub fn activation_backward<T: Real>(
    kind: Activation,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(Error::shape("activation_backward", x.shape(), dy.shape()));
    }
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        *g *= kind.grad(v);
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::{fd_check, rng};

    #[test]
    fn hand_values() {
        assert_eq!(silu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((silu(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(-800.0f64) >= 0.0 && softplus(800.0f64) == 800.0);
        assert!(sigmoid(-800.0f64).is_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(5);
        let x = Tensor::<f64>::randn(&[12], 2.0, &mut r);
        let w = Tensor::<f64>::randn(&[12], 1.0, &mut r);
        for kind in [Activation::Silu, Activation::Sigmoid, Activation::Softplus] {
            let dx = activation_backward(kind, &x, &w).unwrap();
            fd_check(&x, &dx, |x| activation(kind, x).unwrap().dot(&w), 1e-5);
        }
    }
}
