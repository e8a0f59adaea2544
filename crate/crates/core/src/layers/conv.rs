//! Cross-correlation via im2col and a single GEMM per batch item.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::params::LayerParams;
use crate::tensor::{Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const POINTWISE: ConvSpec = ConvSpec { kernel: 1, stride: 1, padding: 0 };
    pub const SAME3: ConvSpec = ConvSpec { kernel: 3, stride: 1, padding: 1 };
    pub const DOWN3: ConvSpec = ConvSpec { kernel: 3, stride: 2, padding: 1 };

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::shape(format!(
                    "input extent {n} (padding {}) smaller than kernel {}",
                    self.padding, self.kernel
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn validate<T: Real>(input: &Tensor4<T>, params: &LayerParams<T>, spec: ConvSpec) -> Result<()> {
    if spec.kernel != 1 && spec.kernel != 3 {
        return Err(Error::shape(format!("unsupported kernel size {}", spec.kernel)));
    }
    if spec.stride == 0 {
        return Err(Error::shape("stride must be positive"));
    }
    let [_, in_ch, kh, kw] = params.weight.shape();
    if kh != spec.kernel || kw != spec.kernel {
        return Err(Error::shape(format!(
            "weight kernel {kh}x{kw} does not match spec kernel {}",
            spec.kernel
        )));
    }
    if input.channels() != in_ch {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels, weight expects {in_ch}",
            input.channels()
        )));
    }
    if params.bias.len() != params.out_channels() {
        return Err(Error::shape("conv2d: bias length differs from output channels"));
    }
    Ok(())
}

/// Unfolds one batch item into a `(in_ch·k·k) × (ho·wo)` matrix.
fn im2col<T: Real>(
    item: &[T],
    in_ch: usize,
    h: usize,
    w: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let k = spec.kernel;
    let p = ho * wo;
    for ci in 0..in_ch {
        let plane = &item[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: accumulates column gradients back onto the input.
fn col2im<T: Real>(
    col: &[T],
    in_ch: usize,
    h: usize,
    w: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    item: &mut [T],
) {
    let k = spec.kernel;
    let p = ho * wo;
    for ci in 0..in_ch {
        let plane = &mut item[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor4<T>,
    params: &LayerParams<T>,
    spec: ConvSpec,
) -> Result<Tensor4<T>> {
    validate(input, params, spec)?;
    let [batch, in_ch, h, w] = input.shape();
    let (ho, wo) = spec.output_size(h, w)?;
    let out_ch = params.out_channels();
    let kk = in_ch * spec.kernel * spec.kernel;
    let p = ho * wo;
    let mut out = Tensor4::zeros([batch, out_ch, ho, wo]);
    if out.is_empty() {
        return Ok(out);
    }
    let weight = params.weight.data();
    out.data_mut().par_chunks_mut(out_ch * p).enumerate().for_each(|(b, dst)| {
        let item = input.item(b);
        for (o, plane) in dst.chunks_mut(p).enumerate() {
            plane.fill(params.bias[o]);
        }
        if spec.is_pointwise() {
            T::gemm(out_ch, kk, p, T::one(), weight, kk as isize, 1, item, p as isize, 1, T::one(), dst, p as isize, 1);
        } else {
            let mut col = vec![T::zero(); kk * p];
            im2col(item, in_ch, h, w, spec, ho, wo, &mut col);
            T::gemm(out_ch, kk, p, T::one(), weight, kk as isize, 1, &col, p as isize, 1, T::one(), dst, p as isize, 1);
        }
    });
    Ok(out)
}

/// Returns the input gradient and accumulates into `params.grad_*`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    params: &mut LayerParams<T>,
    spec: ConvSpec,
) -> Result<Tensor4<T>> {
    validate(input, params, spec)?;
    let [batch, in_ch, h, w] = input.shape();
    let (ho, wo) = spec.output_size(h, w)?;
    let out_ch = params.out_channels();
    grad_out.expect_shape([batch, out_ch, ho, wo], "conv2d_backward grad_out")?;
    let kk = in_ch * spec.kernel * spec.kernel;
    let p = ho * wo;
    let mut grad_in = Tensor4::zeros(input.shape());
    if grad_in.is_empty() || p == 0 {
        return Ok(grad_in);
    }
    let weight = params.weight.data();

    // Per-item partial parameter gradients, summed in batch order below so
    // the result does not depend on how rayon schedules the items.
    let partials: Vec<(Vec<T>, Vec<T>)> = grad_in
        .data_mut()
        .par_chunks_mut(in_ch * h * w)
        .enumerate()
        .map(|(b, gin)| {
            let item = input.item(b);
            let gout = grad_out.item(b);
            let mut gw = vec![T::zero(); out_ch * kk];
            let gb: Vec<T> = gout.chunks(p).map(|plane| plane.iter().copied().sum()).collect();
            if spec.is_pointwise() {
                T::gemm(out_ch, p, kk, T::one(), gout, p as isize, 1, item, 1, p as isize, T::zero(), &mut gw, kk as isize, 1);
                T::gemm(kk, out_ch, p, T::one(), weight, 1, kk as isize, gout, p as isize, 1, T::zero(), gin, p as isize, 1);
            } else {
                let mut col = vec![T::zero(); kk * p];
                im2col(item, in_ch, h, w, spec, ho, wo, &mut col);
                T::gemm(out_ch, p, kk, T::one(), gout, p as isize, 1, &col, 1, p as isize, T::zero(), &mut gw, kk as isize, 1);
                T::gemm(kk, out_ch, p, T::one(), weight, 1, kk as isize, gout, p as isize, 1, T::zero(), &mut col, p as isize, 1);
                col2im(&col, in_ch, h, w, spec, ho, wo, gin);
            }
            (gw, gb)
        })
        .collect();

    for (gw, gb) in partials {
        for (acc, v) in params.grad_weight.data_mut().iter_mut().zip(gw) {
            *acc += v;
        }
        for (acc, v) in params.grad_bias.iter_mut().zip(gb) {
            *acc += v;
        }
    }
    Ok(grad_in)
}
