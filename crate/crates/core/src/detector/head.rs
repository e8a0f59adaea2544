//! The two-stage dense head: a stride-8 backbone, separate classification
//! and regression towers, coarse predictions, and BAM refinement of both
//! branches from the decoded coarse boxes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bam::{bam_backward, bam_forward, BamCache, BamParams};
use crate::border_align::{BoxField, PoolConfig};
use crate::detector::boxes::{combine_boxes, decode_coarse, image_to_feature};
use crate::error::{Error, Result};
use crate::layers::params::join;
use crate::layers::{
    conv2d_backward, conv2d_forward, relu, relu_backward, sigmoid, softplus, ConvSpec, HasParams,
    LayerParams, ParamSlot,
};
use crate::tensor::{Real, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output widths of the stride-2 backbone stages.
    pub backbone_channels: Vec<usize>,
    /// BAM width of the classification branch.
    pub cls_channels: usize,
    /// BAM width of the regression branch.
    pub reg_channels: usize,
    pub num_classes: usize,
    pub pool_size: usize,
    pub sigma: f64,
    /// Initial foreground probability of both classification heads.
    pub prior_prob: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            backbone_channels: vec![16, 32, 32],
            cls_channels: 32,
            reg_channels: 16,
            num_classes: 2,
            pool_size: 10,
            sigma: 0.5,
            prior_prob: 0.01,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Branch widths used for full-scale models (256 / 128).
    pub fn full_width() -> Self {
        Self { cls_channels: 256, reg_channels: 128, backbone_channels: vec![64, 128, 256], ..Self::default() }
    }

    pub fn stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }

    pub fn pool(&self) -> PoolConfig {
        PoolConfig { pool_size: self.pool_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::Input("backbone needs at least one non-empty stage".into()));
        }
        if self.cls_channels == 0 || self.reg_channels == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Input("channel and class counts must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Input(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::Input(format!("prior_prob must be in (0, 1), got {}", self.prior_prob)));
        }
        Ok(())
    }
}

/// Raw head outputs plus the decoded coarse boxes (image coordinates).
#[derive(Debug, Clone)]
pub struct HeadOutputs<T> {
    pub coarse_cls_logits: Tensor4<T>,
    /// Non-negative `(l, t, r, b)` distances in pixels.
    pub coarse_reg: Tensor4<T>,
    pub border_cls_logits: Tensor4<T>,
    pub border_offsets: Tensor4<T>,
    pub coarse_boxes: Tensor4<T>,
    pub stride: usize,
    pub sigma: T,
}

impl<T: Real> HeadOutputs<T> {
    pub fn batch(&self) -> usize {
        self.coarse_cls_logits.batch()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.coarse_cls_logits.height(), self.coarse_cls_logits.width())
    }

    pub fn num_classes(&self) -> usize {
        self.coarse_cls_logits.channels()
    }

    pub fn coarse_box(&self, b: usize, y: usize, x: usize) -> [T; 4] {
        [0, 1, 2, 3].map(|c| self.coarse_boxes.at(b, c, y, x))
    }

    pub fn offsets(&self, b: usize, y: usize, x: usize) -> [T; 4] {
        [0, 1, 2, 3].map(|c| self.border_offsets.at(b, c, y, x))
    }

    pub fn refined_box(&self, b: usize, y: usize, x: usize) -> [T; 4] {
        combine_boxes(self.coarse_box(b, y, x), self.offsets(b, y, x), self.sigma)
    }

    pub fn coarse_prob(&self, b: usize, class: usize, y: usize, x: usize) -> T {
        sigmoid(self.coarse_cls_logits.at(b, class, y, x))
    }

    pub fn border_prob(&self, b: usize, class: usize, y: usize, x: usize) -> T {
        sigmoid(self.border_cls_logits.at(b, class, y, x))
    }
}

/// Upstream gradients for every head output.
#[derive(Debug, Clone)]
pub struct HeadGrads<T> {
    pub coarse_cls_logits: Tensor4<T>,
    /// Gradient w.r.t. the pixel distances in [`HeadOutputs::coarse_reg`].
    pub coarse_reg: Tensor4<T>,
    pub border_cls_logits: Tensor4<T>,
    pub border_offsets: Tensor4<T>,
}

impl<T: Real> HeadGrads<T> {
    pub fn zeros_like(out: &HeadOutputs<T>) -> Self {
        Self {
            coarse_cls_logits: Tensor4::zeros(out.coarse_cls_logits.shape()),
            coarse_reg: Tensor4::zeros(out.coarse_reg.shape()),
            border_cls_logits: Tensor4::zeros(out.border_cls_logits.shape()),
            border_offsets: Tensor4::zeros(out.border_offsets.shape()),
        }
    }
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input of each backbone stage, then the backbone output.
    stage_inputs: Vec<Tensor4<T>>,
    stage_pre: Vec<Tensor4<T>>,
    cls_pre: Tensor4<T>,
    cls_feat: Tensor4<T>,
    reg_pre: Tensor4<T>,
    reg_feat: Tensor4<T>,
    reg_raw: Tensor4<T>,
    cls_bam: BamCache<T>,
    reg_bam: BamCache<T>,
    cls_border: Tensor4<T>,
    reg_border: Tensor4<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn cls_bam(&self) -> &BamCache<T> {
        &self.cls_bam
    }

    pub fn reg_bam(&self) -> &BamCache<T> {
        &self.reg_bam
    }
}

#[derive(Debug, Clone)]
pub struct BorderDet<T> {
    cfg: ModelConfig,
    pub backbone: Vec<LayerParams<T>>,
    pub cls_tower: LayerParams<T>,
    pub reg_tower: LayerParams<T>,
    pub coarse_cls: LayerParams<T>,
    pub coarse_reg: LayerParams<T>,
    pub cls_bam: BamParams<T>,
    pub reg_bam: BamParams<T>,
    pub border_cls: LayerParams<T>,
    pub border_reg: LayerParams<T>,
}

const HEAD_INIT_BOUND: f64 = 0.01;

impl<T: Real> BorderDet<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut backbone = Vec::new();
        let mut prev = cfg.in_channels;
        for &c in &cfg.backbone_channels {
            backbone.push(LayerParams::kaiming(c, prev, 3, &mut rng));
            prev = c;
        }
        let k = cfg.num_classes;
        let prior_bias = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
        Ok(Self {
            cls_tower: LayerParams::kaiming(cfg.cls_channels, prev, 3, &mut rng),
            reg_tower: LayerParams::kaiming(cfg.reg_channels, prev, 3, &mut rng),
            coarse_cls: LayerParams::uniform(k, cfg.cls_channels, 3, HEAD_INIT_BOUND, prior_bias, &mut rng),
            coarse_reg: LayerParams::uniform(4, cfg.reg_channels, 3, HEAD_INIT_BOUND, 0.0, &mut rng),
            cls_bam: BamParams::new(cfg.cls_channels, &mut rng),
            reg_bam: BamParams::new(cfg.reg_channels, &mut rng),
            border_cls: LayerParams::uniform(k, cfg.cls_channels, 1, HEAD_INIT_BOUND, prior_bias, &mut rng),
            border_reg: LayerParams::uniform(4, cfg.reg_channels, 1, HEAD_INIT_BOUND, 0.0, &mut rng),
            backbone,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Changes the pooling size without touching any weights.
    pub fn set_pool_size(&mut self, pool_size: usize) {
        self.cfg.pool_size = pool_size;
    }

    /// Zeroes both second-stage 1×1 heads: border logits and offsets become 0.
    pub fn zero_border_heads(&mut self) {
        for p in [&mut self.border_cls, &mut self.border_reg] {
            p.weight.fill(T::zero());
            p.bias.iter_mut().for_each(|b| *b = T::zero());
            p.bump_version();
        }
    }

    /// Casts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> BorderDet<U> {
        let mut out = BorderDet::<U>::new(self.cfg.clone()).expect("config already validated");
        let mut values: Vec<Vec<T>> = Vec::new();
        self.visit_params("", &mut |_, _, v| values.push(v.to_vec()));
        let mut it = values.into_iter();
        out.visit_params_mut("", &mut |slot| {
            let src = it.next().expect("same layout");
            for (d, s) in slot.value.iter_mut().zip(src) {
                *d = U::lit(s.to_f64_lossy());
            }
        });
        out
    }

    pub fn forward(&self, image: &Tensor4<T>) -> Result<(HeadOutputs<T>, ForwardCache<T>)> {
        self.forward_with_boxes(image, None)
    }

    /// Forward pass. When `frozen_boxes` (image coordinates, `(B, 4, H, W)`)
    /// is given, BAM pools along those boxes instead of the decoded coarse
    /// boxes; used by gradient checks, which need the boxes held constant.
    pub fn forward_with_boxes(
        &self,
        image: &Tensor4<T>,
        frozen_boxes: Option<&Tensor4<T>>,
    ) -> Result<(HeadOutputs<T>, ForwardCache<T>)> {
        if image.channels() != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {}",
                self.cfg.in_channels,
                image.channels()
            )));
        }
        let stride = self.cfg.stride();
        let mut stage_inputs = Vec::with_capacity(self.backbone.len() + 1);
        let mut stage_pre = Vec::with_capacity(self.backbone.len());
        let mut x = image.clone();
        for p in &self.backbone {
            let z = conv2d_forward(&x, p, ConvSpec::DOWN3)?;
            stage_inputs.push(x);
            x = relu(&z);
            stage_pre.push(z);
        }
        let feat = x;
        let cls_pre = conv2d_forward(&feat, &self.cls_tower, ConvSpec::SAME3)?;
        let cls_feat = relu(&cls_pre);
        let reg_pre = conv2d_forward(&feat, &self.reg_tower, ConvSpec::SAME3)?;
        let reg_feat = relu(&reg_pre);
        stage_inputs.push(feat);

        let coarse_cls_logits = conv2d_forward(&cls_feat, &self.coarse_cls, ConvSpec::SAME3)?;
        let reg_raw = conv2d_forward(&reg_feat, &self.coarse_reg, ConvSpec::SAME3)?;
        let s = T::lit(stride as f64);
        let coarse_reg = reg_raw.map(|v| softplus(v) * s);

        let [batch, _, gh, gw] = coarse_reg.shape();
        let (img_h, img_w) = (T::lit(image.height() as f64), T::lit(image.width() as f64));
        let coarse_boxes = match frozen_boxes {
            Some(b) => {
                b.expect_shape([batch, 4, gh, gw], "frozen boxes")?;
                b.clone()
            }
            None => {
                let mut boxes = Tensor4::zeros([batch, 4, gh, gw]);
                for bi in 0..batch {
                    for y in 0..gh {
                        for xx in 0..gw {
                            let d = [0, 1, 2, 3].map(|c| coarse_reg.at(bi, c, y, xx));
                            let bx = decode_coarse(y, xx, d, stride, img_w, img_h);
                            for (c, v) in bx.into_iter().enumerate() {
                                boxes.set(bi, c, y, xx, v);
                            }
                        }
                    }
                }
                boxes
            }
        };
        let feature_boxes = BoxField::new(coarse_boxes.map(|v| image_to_feature(v, stride)))?;

        let pool = self.cfg.pool();
        let (cls_border, cls_bam) = bam_forward(&cls_feat, &feature_boxes, &self.cls_bam, pool)?;
        let (reg_border, reg_bam) = bam_forward(&reg_feat, &feature_boxes, &self.reg_bam, pool)?;
        let border_cls_logits = conv2d_forward(&cls_border, &self.border_cls, ConvSpec::POINTWISE)?;
        let border_offsets = conv2d_forward(&reg_border, &self.border_reg, ConvSpec::POINTWISE)?;

        let outputs = HeadOutputs {
            coarse_cls_logits,
            coarse_reg,
            border_cls_logits,
            border_offsets,
            coarse_boxes,
            stride,
            sigma: T::lit(self.cfg.sigma),
        };
        let cache = ForwardCache {
            stage_inputs,
            stage_pre,
            cls_pre,
            cls_feat,
            reg_pre,
            reg_feat,
            reg_raw,
            cls_bam,
            reg_bam,
            cls_border,
            reg_border,
        };
        Ok((outputs, cache))
    }

    /// Accumulates parameter gradients. Box coordinates are constants.
    pub fn backward(&mut self, grads: &HeadGrads<T>, cache: &ForwardCache<T>) -> Result<()> {
        let g_reg_border =
            conv2d_backward(&cache.reg_border, &grads.border_offsets, &mut self.border_reg, ConvSpec::POINTWISE)?;
        let g_cls_border =
            conv2d_backward(&cache.cls_border, &grads.border_cls_logits, &mut self.border_cls, ConvSpec::POINTWISE)?;
        let mut g_reg_feat = bam_backward(&g_reg_border, &cache.reg_bam, &mut self.reg_bam)?;
        let mut g_cls_feat = bam_backward(&g_cls_border, &cache.cls_bam, &mut self.cls_bam)?;

        let s = T::lit(self.cfg.stride() as f64);
        let g_raw = cache.reg_raw.zip_map(&grads.coarse_reg, |r, g| g * sigmoid(r) * s)?;
        let g = conv2d_backward(&cache.reg_feat, &g_raw, &mut self.coarse_reg, ConvSpec::SAME3)?;
        g_reg_feat.add_scaled(&g, T::one())?;
        let g = conv2d_backward(&cache.cls_feat, &grads.coarse_cls_logits, &mut self.coarse_cls, ConvSpec::SAME3)?;
        g_cls_feat.add_scaled(&g, T::one())?;

        let feat = cache.stage_inputs.last().expect("backbone output cached");
        let g_reg_pre = relu_backward(&cache.reg_pre, &g_reg_feat)?;
        let mut g_x = conv2d_backward(feat, &g_reg_pre, &mut self.reg_tower, ConvSpec::SAME3)?;
        let g_cls_pre = relu_backward(&cache.cls_pre, &g_cls_feat)?;
        let g = conv2d_backward(feat, &g_cls_pre, &mut self.cls_tower, ConvSpec::SAME3)?;
        g_x.add_scaled(&g, T::one())?;

        for (i, p) in self.backbone.iter_mut().enumerate().rev() {
            let g_pre = relu_backward(&cache.stage_pre[i], &g_x)?;
            g_x = conv2d_backward(&cache.stage_inputs[i], &g_pre, p, ConvSpec::DOWN3)?;
        }
        Ok(())
    }
}

impl<T: Real> HasParams<T> for BorderDet<T> {
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        for (i, p) in self.backbone.iter_mut().enumerate() {
            p.visit_params_mut(&join(prefix, &format!("backbone.{i}")), f);
        }
        self.cls_tower.visit_params_mut(&join(prefix, "cls_tower"), f);
        self.reg_tower.visit_params_mut(&join(prefix, "reg_tower"), f);
        self.coarse_cls.visit_params_mut(&join(prefix, "coarse_cls"), f);
        self.coarse_reg.visit_params_mut(&join(prefix, "coarse_reg"), f);
        self.cls_bam.visit_params_mut(&join(prefix, "cls_bam"), f);
        self.reg_bam.visit_params_mut(&join(prefix, "reg_bam"), f);
        self.border_cls.visit_params_mut(&join(prefix, "border_cls"), f);
        self.border_reg.visit_params_mut(&join(prefix, "border_reg"), f);
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[T])) {
        for (i, p) in self.backbone.iter().enumerate() {
            p.visit_params(&join(prefix, &format!("backbone.{i}")), f);
        }
        self.cls_tower.visit_params(&join(prefix, "cls_tower"), f);
        self.reg_tower.visit_params(&join(prefix, "reg_tower"), f);
        self.coarse_cls.visit_params(&join(prefix, "coarse_cls"), f);
        self.coarse_reg.visit_params(&join(prefix, "coarse_reg"), f);
        self.cls_bam.visit_params(&join(prefix, "cls_bam"), f);
        self.reg_bam.visit_params(&join(prefix, "reg_bam"), f);
        self.border_cls.visit_params(&join(prefix, "border_cls"), f);
        self.border_reg.visit_params(&join(prefix, "border_reg"), f);
    }

    fn bump_version(&mut self) {
        for p in &mut self.backbone {
            p.bump_version();
        }
        self.cls_tower.bump_version();
        self.reg_tower.bump_version();
        self.coarse_cls.bump_version();
        self.coarse_reg.bump_version();
        self.cls_bam.bump_version();
        self.reg_bam.bump_version();
        self.border_cls.bump_version();
        self.border_reg.bump_version();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            backbone_channels: vec![4, 6, 8],
            cls_channels: 4,
            reg_channels: 2,
            ..ModelConfig::default()
        }
    }

    fn image(seed: u64, shape: [usize; 4]) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn output_shapes() {
        let model = BorderDet::<f64>::new(small_cfg()).unwrap();
        let (out, _) = model.forward(&image(0, [2, 1, 64, 64])).unwrap();
        assert_eq!(out.coarse_cls_logits.shape(), [2, 2, 8, 8]);
        assert_eq!(out.coarse_reg.shape(), [2, 4, 8, 8]);
        assert_eq!(out.border_cls_logits.shape(), [2, 2, 8, 8]);
        assert_eq!(out.border_offsets.shape(), [2, 4, 8, 8]);
        assert!(out.coarse_reg.data().iter().all(|&d| d >= 0.0));
        for b in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    let bx = out.coarse_box(b, y, x);
                    assert!(bx[2] >= bx[0] && bx[3] >= bx[1]);
                }
            }
        }
    }

    #[test]
    fn zero_border_heads_leave_coarse_boxes() {
        let mut model = BorderDet::<f32>::new(ModelConfig::default()).unwrap();
        model.zero_border_heads();
        let img = image(1, [1, 1, 64, 64]).cast::<f32>();
        let (out, _) = model.forward(&img).unwrap();
        assert!(out.border_cls_logits.data().iter().all(|&v| v == 0.0));
        assert!(out.border_offsets.data().iter().all(|&v| v == 0.0));
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.refined_box(0, y, x), out.coarse_box(0, y, x));
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = BorderDet::<f32>::new(ModelConfig::default()).unwrap();
        let img = image(2, [3, 1, 64, 64]).cast::<f32>();
        let (a, _) = model.forward(&img).unwrap();
        let (b, _) = model.forward(&img).unwrap();
        assert_eq!(a.border_offsets, b.border_offsets);
        assert_eq!(a.border_cls_logits, b.border_cls_logits);
        assert_eq!(a.coarse_boxes, b.coarse_boxes);
    }

    #[test]
    fn wrong_input_channels() {
        let model = BorderDet::<f32>::new(ModelConfig::default()).unwrap();
        assert!(model.forward(&Tensor4::zeros([1, 3, 64, 64])).is_err());
    }

    #[test]
    fn cast_round_trip_preserves_layout() {
        let model = BorderDet::<f64>::new(small_cfg()).unwrap();
        let back = model.cast::<f32>().cast::<f64>();
        let mut a = Vec::new();
        model.visit_params("", &mut |n, s, v| a.push((n.to_string(), s, v.len())));
        let mut b = Vec::new();
        back.visit_params("", &mut |n, s, v| b.push((n.to_string(), s, v.len())));
        assert_eq!(a, b);
    }
}
