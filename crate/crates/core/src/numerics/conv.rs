use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{check_finite, Tensor};

/// Depthwise causal convolution along time.
///
/// `y[t,c] = Σ_{j<kw} kernels[c,j] · x[t−kw+1+j, c]`, where positions before
/// 0 read from `tail` (the previous `kw−1` inputs, oldest first) or zero.
pub fn depthwise_causal_conv<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    tail: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || kernels.rank() != 2 || kernels.shape()[0] != x.shape()[1] {
        return Err(Error::shape(
            "depthwise_causal_conv",
            x.shape(),
            kernels.shape(),
        ));
    }
    let (len, d) = (x.shape()[0], x.shape()[1]);
    let kw = kernels.shape()[1];
    if let Some(t) = tail {
        if kw == 1 || t.shape() != [kw - 1, d] {
            return Err(Error::shape(
                "depthwise_causal_conv tail",
                t.shape(),
                &[kw - 1, d],
            ));
        }
    }
    let mut y = Tensor::zeros(x.shape());
    conv_forward_slices(
        x.data(),
        kernels.data(),
        tail.map(|t| t.data()),
        y.data_mut(),
        len,
        d,
        kw,
    );
    check_finite("depthwise_causal_conv", y.data())?;
    Ok(y)
}

pub(crate) fn conv_forward_slices<T: Real>(
    x: &[T],
    kernels: &[T],
    tail: Option<&[T]>,
    y: &mut [T],
    len: usize,
    d: usize,
    kw: usize,
) {
    for t in 0..len {
        let yr = &mut y[t * d..(t + 1) * d];
        for j in 0..kw {
            // source time index, shifted by kw-1 so the tail occupies [0, kw-1)
            let s = t + j;
            let src: &[T] = if s + 1 >= kw {
                let ts = s + 1 - kw;
                &x[ts * d..(ts + 1) * d]
            } else if let Some(tail) = tail {
                &tail[s * d..(s + 1) * d]
            } else {
                continue;
            };
            for c in 0..d {
                yr[c] += kernels[c * kw + j] * src[c];
            }
        }
    }
}

/// Training-mode gradient (zero tail). Returns `(dx, dkernels)`.
pub fn depthwise_causal_conv_backward<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if dy.shape() != x.shape() || kernels.shape()[0] != x.shape()[1] {
        return Err(Error::shape(
            "depthwise_causal_conv_backward",
            x.shape(),
            dy.shape(),
        ));
    }
    let (len, d) = (x.shape()[0], x.shape()[1]);
    let kw = kernels.shape()[1];
    let mut dx = Tensor::zeros(x.shape());
    let mut dk = Tensor::zeros(kernels.shape());
    conv_backward_slices(
        x.data(),
        kernels.data(),
        dy.data(),
        dx.data_mut(),
        dk.data_mut(),
        len,
        d,
        kw,
    );
    Ok((dx, dk))
}

pub(crate) fn conv_backward_slices<T: Real>(
    x: &[T],
    kernels: &[T],
    dy: &[T],
    dx: &mut [T],
    dk: &mut [T],
    len: usize,
    d: usize,
    kw: usize,
) {
    for t in 0..len {
        let dyr = &dy[t * d..(t + 1) * d];
        for j in 0..kw {
            let s = t + j;
            if s + 1 < kw {
                continue;
            }
            let ts = s + 1 - kw;
            for c in 0..d {
                dk[c * kw + j] += dyr[c] * x[ts * d + c];
                dx[ts * d + c] += dyr[c] * kernels[c * kw + j];
            }
        }
    }
}
