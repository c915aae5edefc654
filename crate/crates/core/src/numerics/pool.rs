use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{check_finite, Tensor};

/// Mean of each run of `chunk` consecutive rows.
pub fn mean_pool_chunks<T: Real>(x: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape("mean_pool_chunks", x.shape(), &[0, 0]));
    }
    let (len, d) = (x.shape()[0], x.shape()[1]);
    if chunk == 0 || len % chunk != 0 {
        return Err(Error::NotDivisible {
            op: "mean_pool_chunks",
            len,
            chunk,
        });
    }
    let n = len / chunk;
    let mut y = Tensor::zeros(&[n, d]);
    for t in 0..n {
        chunk_mean(
            &x.data()[t * chunk * d..(t + 1) * chunk * d],
            d,
            y.row_mut(t),
        );
    }
    check_finite("mean_pool_chunks", y.data())?;
    Ok(y)
}

/// Sums rows in order, then divides. Decoding uses the same order so the
/// chunk mean is reproduced bit for bit.
#[inline]
pub fn chunk_mean<T: Real>(rows: &[T], d: usize, out: &mut [T]) {
    out.fill(T::zero());
    let count = rows.len() / d;
    for r in rows.chunks_exact(d) {
        for (o, &v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let c = T::from_usize(count);
    for o in out.iter_mut() {
        *o /= c;
    }
}

/// Spreads each pooled gradient uniformly (`1/chunk`) over its rows.
pub fn mean_pool_chunks_backward<T: Real>(dy: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
    if dy.rank() != 2 || chunk == 0 {
        return Err(Error::shape(
            "mean_pool_chunks_backward",
            dy.shape(),
            &[chunk],
        ));
    }
    let (n, d) = (dy.shape()[0], dy.shape()[1]);
    let inv = T::one() / T::from_usize(chunk);
    let mut dx = Tensor::zeros(&[n * chunk, d]);
    for t in 0..n {
        for r in 0..chunk {
            for (g, &v) in dx.row_mut(t * chunk + r).iter_mut().zip(dy.row(t)) {
                *g = v * inv;
            }
        }
    }
    Ok(dx)
}
