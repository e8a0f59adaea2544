use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::params::AffineParams;
use crate::tensor::{Real, Tensor4};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Saved normalized activations and per-plane inverse standard deviations.
#[derive(Debug, Clone)]
pub struct InstanceNormCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes every `(batch, channel)` plane to zero mean and unit
/// (biased) variance, then applies the optional per-channel affine map.
pub fn instance_norm_forward<T: Real>(
    input: &Tensor4<T>,
    affine: Option<&AffineParams<T>>,
    eps: T,
) -> Result<(Tensor4<T>, InstanceNormCache<T>)> {
    let n = input.plane_len();
    if n < 2 {
        return Err(Error::DegeneratePlane(n));
    }
    let channels = input.channels();
    if let Some(a) = affine {
        if a.channels() != channels {
            return Err(Error::shape(format!(
                "instance_norm: affine has {} channels, input has {channels}",
                a.channels()
            )));
        }
    }
    let mut xhat = Tensor4::zeros(input.shape());
    let mut out = Tensor4::zeros(input.shape());
    let count = T::lit(n as f64);
    let inv_std: Vec<T> = xhat
        .data_mut()
        .par_chunks_mut(n)
        .zip(out.data_mut().par_chunks_mut(n))
        .zip(input.data().par_chunks(n))
        .enumerate()
        .map(|(plane_idx, ((xh, y), x))| {
            let mean = x.iter().copied().sum::<T>() / count;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            let (g, b) = match affine {
                Some(a) => {
                    let c = plane_idx % channels;
                    (a.gamma[c], a.beta[c])
                }
                None => (T::one(), T::zero()),
            };
            for ((h, o), &v) in xh.iter_mut().zip(y.iter_mut()).zip(x) {
                *h = (v - mean) * inv;
                *o = g * *h + b;
            }
            inv
        })
        .collect();
    Ok((out, InstanceNormCache { xhat, inv_std }))
}

pub fn instance_norm_backward<T: Real>(
    grad_out: &Tensor4<T>,
    cache: &InstanceNormCache<T>,
    affine: Option<&mut AffineParams<T>>,
) -> Result<Tensor4<T>> {
    grad_out.expect_shape(cache.xhat.shape(), "instance_norm_backward")?;
    let n = grad_out.plane_len();
    let channels = grad_out.channels();
    let count = T::lit(n as f64);
    let gamma: Option<Vec<T>> = affine.as_ref().map(|a| a.gamma.clone());
    let mut grad_in = Tensor4::zeros(grad_out.shape());
    let sums: Vec<(T, T)> = grad_in
        .data_mut()
        .par_chunks_mut(n)
        .zip(grad_out.data().par_chunks(n))
        .zip(cache.xhat.data().par_chunks(n))
        .enumerate()
        .map(|(plane_idx, ((gx, gy), xh))| {
            let g = gamma.as_ref().map_or(T::one(), |gm| gm[plane_idx % channels]);
            let sum_dy: T = gy.iter().copied().sum();
            let sum_dy_xhat: T = gy.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            let mean_d = g * sum_dy / count;
            let mean_dx = g * sum_dy_xhat / count;
            let inv = cache.inv_std[plane_idx];
            for ((o, &dy), &h) in gx.iter_mut().zip(gy).zip(xh) {
                *o = inv * (g * dy - mean_d - h * mean_dx);
            }
            (sum_dy_xhat, sum_dy)
        })
        .collect();
    if let Some(a) = affine {
        for (plane_idx, (dg, db)) in sums.into_iter().enumerate() {
            let c = plane_idx % channels;
            a.grad_gamma[c] += dg;
            a.grad_beta[c] += db;
        }
    }
    Ok(grad_in)
}
