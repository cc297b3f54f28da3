//! Per-channel batch normalization kernels over `N x C x H x W` tensors.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Batch statistics observed in a training-mode forward pass, used to
/// update running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate (`n / (n - 1)` correction).
    pub var: Vec<T>,
}

pub(crate) struct BnForward<T> {
    pub output: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub stats: Option<BatchStats<T>>,
}

fn check<T: Real>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 4]> {
    let dims = input.dims4()?;
    for p in [gamma, beta] {
        if p.shape() != [dims[1]] {
            return Err(Error::ChannelMismatch {
                op: "batch_norm",
                expected: dims[1],
                actual: p.shape().iter().product(),
            });
        }
    }
    Ok(dims)
}

/// Training mode normalizes with the batch's own statistics; inference mode
/// uses the supplied running statistics.
pub(crate) fn batch_norm_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&[T], &[T])>,
    eps: T,
) -> Result<BnForward<T>> {
    let [n, c, h, w] = check(input, gamma, beta)?;
    let plane = h * w;
    let count = n * plane;
    let x = input.data();
    let at = |ni: usize, ci: usize| (ni * c + ci) * plane;

    let (mean, var, stats) = match running {
        Some((rm, rv)) => {
            if rm.len() != c || rv.len() != c {
                return Err(Error::ChannelMismatch {
                    op: "batch_norm",
                    expected: c,
                    actual: rm.len(),
                });
            }
            (rm.to_vec(), rv.to_vec(), None)
        }
        None => {
            let m = T::from_usize(count).unwrap();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut s = T::zero();
                for ni in 0..n {
                    s = x[at(ni, ci)..at(ni, ci) + plane].iter().fold(s, |a, &v| a + v);
                }
                let mu = s / m;
                let mut ss = T::zero();
                for ni in 0..n {
                    ss = x[at(ni, ci)..at(ni, ci) + plane]
                        .iter()
                        .fold(ss, |a, &v| a + (v - mu) * (v - mu));
                }
                mean[ci] = mu;
                var[ci] = ss / m;
            }
            let unbiased = if count > 1 {
                let k = m / T::from_usize(count - 1).unwrap();
                var.iter().map(|&v| v * k).collect()
            } else {
                var.clone()
            };
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let (g, b, mu, is) = (gamma.data()[ci], beta.data()[ci], mean[ci], inv_std[ci]);
            let r = at(ni, ci)..at(ni, ci) + plane;
            for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&x[r]) {
                *xh = (v - mu) * is;
                *o = g * *xh + b;
            }
        }
    }
    Ok(BnForward {
        output: Tensor::from_vec(input.shape(), out)?,
        xhat: Tensor::from_vec(input.shape(), xhat)?,
        inv_std,
        stats,
    })
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub(crate) fn batch_norm_backward<T: Real>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    training: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = xhat.dims4()?;
    let plane = h * w;
    let m = T::from_usize(n * plane).unwrap();
    let xh = xhat.data();
    let dy = grad_out.data();
    let at = |ni: usize, ci: usize| (ni * c + ci) * plane;

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        for ni in 0..n {
            let r = at(ni, ci)..at(ni, ci) + plane;
            for (&d, &xv) in dy[r.clone()].iter().zip(&xh[r]) {
                dbeta[ci] = dbeta[ci] + d;
                dgamma[ci] = dgamma[ci] + d * xv;
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for ci in 0..c {
        let scale = gamma.data()[ci] * inv_std[ci];
        for ni in 0..n {
            let r = at(ni, ci)..at(ni, ci) + plane;
            for ((o, &d), &xv) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&xh[r]) {
                *o = if training {
                    scale * (d - dbeta[ci] / m - xv * dgamma[ci] / m)
                } else {
                    scale * d
                };
            }
        }
    }
    Ok((
        Tensor::from_vec(xhat.shape(), dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}
