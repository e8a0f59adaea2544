//! Border Alignment Module: a 1×1 expansion to five border-sensitive channel
//! blocks with instance normalization, BorderAlign over the predicted boxes,
//! and a 1×1 reduction back to the input width.

use rand::Rng;

use crate::border_align::{
    border_align_backward, border_align_forward, ArgmaxRecord, BoxField, PoolConfig, BLOCKS,
};
use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, instance_norm_backward, instance_norm_forward, AffineParams,
    ConvSpec, HasParams, InstanceNormCache, LayerParams, ParamSlot, INSTANCE_NORM_EPS,
};
use crate::layers::params::join;
use crate::tensor::{Real, Tensor4};

#[derive(Debug, Clone)]
pub struct BamParams<T> {
    /// `C → 5C`, 1×1.
    pub expand: LayerParams<T>,
    pub norm: AffineParams<T>,
    /// `5C → C`, 1×1.
    pub reduce: LayerParams<T>,
}

impl<T: Real> BamParams<T> {
    /// Fan-in scaled uniform weights, zero biases, identity affine.
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let wide = BLOCKS * channels;
        Self {
            expand: LayerParams::fan_in(wide, channels, 1, rng),
            norm: AffineParams::identity(wide),
            reduce: LayerParams::fan_in(channels, wide, 1, rng),
        }
    }

    pub fn from_parts(expand: LayerParams<T>, norm: AffineParams<T>, reduce: LayerParams<T>) -> Result<Self> {
        let p = Self { expand, norm, reduce };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.reduce.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.reduce.out_channels();
        let ok = self.expand.kernel() == 1
            && self.reduce.kernel() == 1
            && self.expand.out_channels() == BLOCKS * c
            && self.expand.in_channels() == c
            && self.norm.channels() == BLOCKS * c
            && self.reduce.in_channels() == BLOCKS * c;
        if !ok {
            return Err(Error::shape(format!(
                "inconsistent BAM params: expand {:?}, norm {}, reduce {:?}",
                self.expand.weight.shape(),
                self.norm.channels(),
                self.reduce.weight.shape()
            )));
        }
        Ok(())
    }

    fn version(&self) -> u64 {
        self.expand.version() + self.norm.version() + self.reduce.version()
    }
}

impl<T: Real> HasParams<T> for BamParams<T> {
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        self.expand.visit_params_mut(&join(prefix, "expand"), f);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.reduce.visit_params_mut(&join(prefix, "reduce"), f);
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[T])) {
        self.expand.visit_params(&join(prefix, "expand"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.reduce.visit_params(&join(prefix, "reduce"), f);
    }

    fn bump_version(&mut self) {
        self.expand.bump_version();
        self.norm.bump_version();
        self.reduce.bump_version();
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BamCache<T> {
    pub input: Tensor4<T>,
    pub norm: InstanceNormCache<T>,
    /// BorderAlign output, i.e. the input of the reduction conv.
    pub pooled: Tensor4<T>,
    pub argmax: ArgmaxRecord<T>,
    pub boxes: BoxField<T>,
    version: u64,
}

pub fn bam_forward<T: Real>(
    feat: &Tensor4<T>,
    boxes: &BoxField<T>,
    params: &BamParams<T>,
    cfg: PoolConfig,
) -> Result<(Tensor4<T>, BamCache<T>)> {
    params.validate()?;
    let expanded = conv2d_forward(feat, &params.expand, ConvSpec::POINTWISE)?;
    let (normalized, norm) =
        instance_norm_forward(&expanded, Some(&params.norm), T::lit(INSTANCE_NORM_EPS))?;
    let (pooled, argmax) = border_align_forward(&normalized, boxes, cfg)?;
    let out = conv2d_forward(&pooled, &params.reduce, ConvSpec::POINTWISE)?;
    let cache = BamCache {
        input: feat.clone(),
        norm,
        pooled,
        argmax,
        boxes: boxes.clone(),
        version: params.version(),
    };
    Ok((out, cache))
}

/// Returns the gradient w.r.t. `feat` and accumulates parameter gradients.
pub fn bam_backward<T: Real>(
    grad_out: &Tensor4<T>,
    cache: &BamCache<T>,
    params: &mut BamParams<T>,
) -> Result<Tensor4<T>> {
    let current = params.version();
    if current != cache.version {
        return Err(Error::StaleCache { cached: cache.version, current });
    }
    let g_pooled = conv2d_backward(&cache.pooled, grad_out, &mut params.reduce, ConvSpec::POINTWISE)?;
    let g_norm = border_align_backward(&g_pooled, &cache.argmax, &cache.boxes, cache.pooled.shape())?;
    let g_expanded = instance_norm_backward(&g_norm, &cache.norm, Some(&mut params.norm))?;
    conv2d_backward(&cache.input, &g_expanded, &mut params.expand, ConvSpec::POINTWISE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::oracles::{border_align_oracle, naive_conv2d};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_feat(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = BamParams::<f64>::new(3, &mut rng);
        let feat = Tensor4::zeros([2, 3, 4, 4]);
        let boxes = BoxField::uniform(2, 4, 4, [0.0, 0.0, 3.0, 3.0]).unwrap();
        let (out, _) = bam_forward(&feat, &boxes, &params, PoolConfig::default()).unwrap();
        assert_eq!(out.shape(), feat.shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    /// Stage-by-stage oracle: naive conv, longhand normalization, oracle
    /// BorderAlign, naive conv.
    fn composed_oracle(feat: &Tensor4<f64>, boxes: &BoxField<f64>, p: &BamParams<f64>, n: usize) -> Tensor4<f64> {
        let e = naive_conv2d(feat, &p.expand.weight, &p.expand.bias, 1, 0);
        let mut normed = e.clone();
        let hw = e.plane_len() as f64;
        for b in 0..e.batch() {
            for c in 0..e.channels() {
                let plane = e.plane(b, c);
                let mean = plane.iter().sum::<f64>() / hw;
                let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw;
                let out = normed.plane_mut(b, c);
                for (o, v) in out.iter_mut().zip(plane) {
                    *o = p.norm.gamma[c] * (v - mean) / (var + 1e-5).sqrt() + p.norm.beta[c];
                }
            }
        }
        let pooled = border_align_oracle(&normed, boxes, n);
        naive_conv2d(&pooled, &p.reduce.weight, &p.reduce.bias, 1, 0)
    }

    #[test]
    fn matches_stage_oracles() {
        let c = 2;
        let mut expand = LayerParams::zeros(5 * c, c, 1);
        for blk in 0..5 {
            for i in 0..c {
                expand.weight.set(blk * c + i, i, 0, 0, 1.0 + 0.1 * blk as f64);
            }
        }
        let mut reduce = LayerParams::zeros(c, 5 * c, 1);
        for blk in 0..5 {
            for i in 0..c {
                reduce.weight.set(i, blk * c + i, 0, 0, 0.2);
            }
        }
        let params = BamParams::from_parts(expand, AffineParams::identity(5 * c), reduce).unwrap();
        let feat = random_feat([1, c, 6, 6], 42);
        for bx in [[0.5, 1.0, 4.0, 4.5], [-3.0, -4.0, -1.0, -2.0], [7.0, 8.0, 12.0, 15.0]] {
            let boxes = BoxField::uniform(1, 6, 6, bx).unwrap();
            let (out, _) = bam_forward(&feat, &boxes, &params, PoolConfig::default()).unwrap();
            let oracle = composed_oracle(&feat, &boxes, &params, 10);
            assert!(out.is_finite());
            for (a, b) in out.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = BamParams::<f64>::new(2, &mut rng);
        let feat = random_feat([1, 2, 5, 5], 4);
        let boxes = BoxField::uniform(1, 5, 5, [0.5, 0.5, 3.5, 3.0]).unwrap();
        let (out, cache) = bam_forward(&feat, &boxes, &params, PoolConfig::default()).unwrap();
        let g = bam_backward(&Tensor4::zeros(out.shape()), &cache, &mut params).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        let mut total = 0.0;
        params.visit_params_mut("", &mut |s| total += s.grad.iter().map(|v| v.abs()).sum::<f64>());
        assert_eq!(total, 0.0);
    }

    #[test]
    fn gradients_accumulate_across_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = BamParams::<f64>::new(2, &mut rng);
        let boxes = BoxField::uniform(1, 5, 5, [0.5, 0.5, 3.5, 3.0]).unwrap();
        let f1 = random_feat([1, 2, 5, 5], 6);
        let f2 = random_feat([1, 2, 5, 5], 7);
        let g = random_feat([1, 2, 5, 5], 8);
        let collect = |p: &BamParams<f64>| {
            let mut v = Vec::new();
            p.clone().visit_params_mut("", &mut |s| v.extend_from_slice(s.grad));
            v
        };
        let run = |p: &mut BamParams<f64>, f: &Tensor4<f64>| {
            let (_, cache) = bam_forward(f, &boxes, p, PoolConfig::default()).unwrap();
            bam_backward(&g, &cache, p).unwrap();
        };
        let mut a = base.clone();
        run(&mut a, &f1);
        let ga = collect(&a);
        let mut b = base.clone();
        run(&mut b, &f2);
        let gb = collect(&b);
        let mut both = base.clone();
        run(&mut both, &f1);
        run(&mut both, &f2);
        for ((x, y), z) in ga.iter().zip(&gb).zip(collect(&both)) {
            assert_eq!(x + y, z);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = BamParams::<f32>::new(2, &mut rng);
        let feat = Tensor4::full([1, 2, 3, 3], 0.5f32);
        let boxes = BoxField::uniform(1, 3, 3, [0.0, 0.0, 2.0, 2.0]).unwrap();
        let (out, cache) = bam_forward(&feat, &boxes, &params, PoolConfig::default()).unwrap();
        params.bump_version();
        let err = bam_backward(&out, &cache, &mut params).unwrap_err();
        assert!(matches!(err, Error::StaleCache { .. }));
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = BamParams::<f32>::new(4, &mut rng);
        let feat = Tensor4::full([3, 4, 5, 7], 0.1f32);
        let boxes = BoxField::uniform(3, 5, 7, [0.0, 0.0, 2.0, 2.0]).unwrap();
        let (out, _) = bam_forward(&feat, &boxes, &params, PoolConfig::default()).unwrap();
        assert_eq!(out.shape(), feat.shape());
        let wrong = Tensor4::full([3, 3, 5, 7], 0.1f32);
        assert!(bam_forward(&wrong, &boxes, &params, PoolConfig::default()).is_err());
    }
}
