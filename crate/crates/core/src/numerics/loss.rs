use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Target value marking a position that contributes no loss.
pub const IGNORE_INDEX: i64 = -100;

fn validate<T: Real>(logits: &Tensor<T>, targets: &[i64], ignore: i64) -> Result<usize> {
    if logits.rows() != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape(),
            &[targets.len()],
        ));
    }
    let v = logits.last_dim();
    let mut count = 0;
    for &t in targets {
        if t == ignore {
            continue;
        }
        if t < 0 || t as usize >= v {
            return Err(Error::invalid(
                "cross_entropy",
                alloc::format!("target {t} outside [0, {v})"),
            ));
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoTargets);
    }
    Ok(count)
}

/// Negative log-likelihood summed over non-ignored rows, plus the count.
pub fn cross_entropy_sum<T: Real>(
    logits: &Tensor<T>,
    targets: &[i64],
    ignore: i64,
) -> Result<(T, usize)> {
    let count = validate(logits, targets, ignore)?;
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let row = logits.row(r);
        total += log_sum_exp(row) - row[t as usize];
    }
    if !total.is_finite() {
        return Err(Error::NonFinite {
            op: "cross_entropy",
        });
    }
    Ok((total, count))
}

#[inline]
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// `∂(sum loss)/∂logits · scale`, written into `dlogits` (ignored rows zero).
pub fn cross_entropy_sum_backward<T: Real>(
    logits: &Tensor<T>,
    targets: &[i64],
    ignore: i64,
    scale: T,
) -> Result<Tensor<T>> {
    validate(logits, targets, ignore)?;
    let mut d = Tensor::zeros(logits.shape());
    for (r, &t) in targets.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        let dr = d.row_mut(r);
        for (g, &x) in dr.iter_mut().zip(row) {
            *g = (x - lse).exp() * scale;
        }
        dr[t as usize] -= scale;
    }
    Ok(d)
}

/// Mean cross-entropy over non-ignored positions.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[i64], ignore: i64) -> Result<T> {
    let (s, n) = cross_entropy_sum(logits, targets, ignore)?;
    Ok(s / T::from_usize(n))
}

pub fn cross_entropy_backward<T: Real>(
    logits: &Tensor<T>,
    targets: &[i64],
    ignore: i64,
) -> Result<Tensor<T>> {
    let n = validate(logits, targets, ignore)?;
    cross_entropy_sum_backward(logits, targets, ignore, T::one() / T::from_usize(n))
}
