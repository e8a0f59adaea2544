//! Sigmoid focal loss, IoU loss, L1 offset loss and the four-term total.

use serde::{Deserialize, Serialize};

use crate::detector::head::{HeadGrads, HeadOutputs};
use crate::layers::softplus;
use crate::tensor::{Real, Tensor4};
use crate::training::targets::{BorderTargets, CoarseTargets};

pub const IOU_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

/// Loss and `d loss / d logit` for one sigmoid output.
#[inline]
pub fn focal_term<T: Real>(logit: T, positive: bool, params: FocalParams) -> (T, T) {
    let alpha = T::lit(params.alpha);
    let gamma = T::lit(params.gamma);
    let one = T::one();
    let p = crate::layers::sigmoid(logit);
    if positive {
        let log_p = -softplus(-logit);
        let w = (one - p).powf(gamma);
        (-alpha * w * log_p, alpha * w * (gamma * p * log_p - (one - p)))
    } else {
        let log_q = -softplus(logit);
        let w = p.powf(gamma);
        let a = one - alpha;
        (-a * w * log_q, a * w * (p - gamma * (one - p) * log_q))
    }
}

/// Sum of focal terms over every `(location, class)`. `labels` is flattened
/// `[batch][y][x]` with `0` for background and `k + 1` for class `k`.
pub fn focal_loss<T: Real>(logits: &Tensor4<T>, labels: &[usize], params: FocalParams) -> (T, Tensor4<T>) {
    let [batch, classes, h, w] = logits.shape();
    assert_eq!(labels.len(), batch * h * w, "one label per location");
    let mut grad = Tensor4::zeros(logits.shape());
    let mut total = T::zero();
    for b in 0..batch {
        for c in 0..classes {
            for y in 0..h {
                for x in 0..w {
                    let positive = labels[(b * h + y) * w + x] == c + 1;
                    let (l, g) = focal_term(logits.at(b, c, y, x), positive, params);
                    total += l;
                    grad.set(b, c, y, x, g);
                }
            }
        }
    }
    (total, grad)
}

/// `-ln(IoU)` with IoU floored at `1e-7`, and its gradient w.r.t. `pred`.
pub fn iou_loss<T: Real>(pred: [T; 4], gt: [T; 4]) -> (T, [T; 4]) {
    let zero = T::zero();
    let ix0 = pred[0].max(gt[0]);
    let iy0 = pred[1].max(gt[1]);
    let ix1 = pred[2].min(gt[2]);
    let iy1 = pred[3].min(gt[3]);
    let iw = (ix1 - ix0).max(zero);
    let ih = (iy1 - iy0).max(zero);
    let inter = iw * ih;
    let pw = pred[2] - pred[0];
    let ph = pred[3] - pred[1];
    let area_p = pw * ph;
    let area_g = (gt[2] - gt[0]) * (gt[3] - gt[1]);
    let union = area_p + area_g - inter;
    let floor = T::lit(IOU_FLOOR);
    let iou = if union > zero { inter / union } else { zero };
    if iou < floor {
        return (-floor.ln(), [zero; 4]);
    }
    let d_inter = -T::one() / inter - T::one() / union;
    let d_area = T::one() / union;
    let d_ix0 = if pred[0] > gt[0] { -ih } else { zero };
    let d_ix1 = if pred[2] < gt[2] { ih } else { zero };
    let d_iy0 = if pred[1] > gt[1] { -iw } else { zero };
    let d_iy1 = if pred[3] < gt[3] { iw } else { zero };
    let grad = [
        d_inter * d_ix0 - d_area * ph,
        d_inter * d_iy0 - d_area * pw,
        d_inter * d_ix1 + d_area * ph,
        d_inter * d_iy1 + d_area * pw,
    ];
    (-iou.ln(), grad)
}

/// Mean absolute error over all `4·n` coordinates. Empty input gives 0.
pub fn l1_border_loss<T: Real>(pred: &[[T; 4]], target: &[[T; 4]]) -> (T, Vec<[T; 4]>) {
    assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return (T::zero(), Vec::new());
    }
    let n = T::lit((4 * pred.len()) as f64);
    let mut total = T::zero();
    let grads = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let mut g = [T::zero(); 4];
            for i in 0..4 {
                let d = p[i] - t[i];
                total += d.abs();
                g[i] = if d > T::zero() {
                    T::one() / n
                } else if d < T::zero() {
                    -T::one() / n
                } else {
                    T::zero()
                };
            }
            g
        })
        .collect();
    (total / n, grads)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub coarse_cls: f64,
    pub coarse_reg: f64,
    pub border_cls: f64,
    pub border_reg: f64,
    pub total: f64,
    pub coarse_positives: usize,
    pub border_positives: usize,
}

/// The four-term objective:
///
/// * coarse classification: focal sum over all locations / `max(1, coarse positives)`
/// * coarse regression: mean IoU loss over coarse positives
/// * border classification: focal sum / `max(1, border positives)`
/// * border regression: mean L1 over border positives
pub fn total_loss<T: Real>(
    out: &HeadOutputs<T>,
    coarse: &CoarseTargets<T>,
    border: &BorderTargets<T>,
    focal: FocalParams,
) -> (LossBreakdown, HeadGrads<T>) {
    let mut grads = HeadGrads::zeros_like(out);
    let [batch, _, h, w] = out.coarse_reg.shape();

    let n_coarse = coarse.num_positive();
    let norm_coarse = T::lit(n_coarse.max(1) as f64);
    let (cls_sum, cls_grad) = focal_loss(&out.coarse_cls_logits, &coarse.labels, focal);
    grads.coarse_cls_logits = cls_grad.map(|g| g / norm_coarse);

    let mut reg_sum = T::zero();
    if n_coarse > 0 {
        let inv = T::one() / T::lit(n_coarse as f64);
        for b in 0..batch {
            for y in 0..h {
                for x in 0..w {
                    let idx = (b * h + y) * w + x;
                    if coarse.labels[idx] == 0 {
                        continue;
                    }
                    let d = [0, 1, 2, 3].map(|c| out.coarse_reg.at(b, c, y, x));
                    let t = coarse.dists[idx];
                    let (l, g) = iou_loss([-d[0], -d[1], d[2], d[3]], [-t[0], -t[1], t[2], t[3]]);
                    reg_sum += l;
                    let gd = [-g[0], -g[1], g[2], g[3]];
                    for (c, v) in gd.into_iter().enumerate() {
                        grads.coarse_reg.set(b, c, y, x, v * inv);
                    }
                }
            }
        }
    }
    let coarse_reg = if n_coarse > 0 { reg_sum / T::lit(n_coarse as f64) } else { T::zero() };

    let n_border = border.num_positive();
    let norm_border = T::lit(n_border.max(1) as f64);
    let (bcls_sum, bcls_grad) = focal_loss(&out.border_cls_logits, &border.labels, focal);
    grads.border_cls_logits = bcls_grad.map(|g| g / norm_border);

    let mut positions = Vec::with_capacity(n_border);
    let mut preds = Vec::with_capacity(n_border);
    let mut targets = Vec::with_capacity(n_border);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let idx = (b * h + y) * w + x;
                if border.labels[idx] > 0 {
                    positions.push((b, y, x));
                    preds.push(out.offsets(b, y, x));
                    targets.push(border.offsets[idx]);
                }
            }
        }
    }
    let (breg, breg_grads) = l1_border_loss(&preds, &targets);
    for (&(b, y, x), g) in positions.iter().zip(breg_grads) {
        for (c, v) in g.into_iter().enumerate() {
            grads.border_offsets.set(b, c, y, x, v);
        }
    }

    let parts = [cls_sum / norm_coarse, coarse_reg, bcls_sum / norm_border, breg];
    let total = parts.iter().fold(T::zero(), |a, &b| a + b);
    let breakdown = LossBreakdown {
        coarse_cls: parts[0].to_f64_lossy(),
        coarse_reg: parts[1].to_f64_lossy(),
        border_cls: parts[2].to_f64_lossy(),
        border_reg: parts[3].to_f64_lossy(),
        total: total.to_f64_lossy(),
        coarse_positives: n_coarse,
        border_positives: n_border,
    };
    (breakdown, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheckConfig};

    #[test]
    fn gamma_zero_is_weighted_cross_entropy() {
        let p = FocalParams { alpha: 0.25, gamma: 0.0 };
        for &z in &[-3.0f64, -0.2, 0.0, 1.7] {
            let s = 1.0 / (1.0 + (-z).exp());
            let (pos, _) = focal_term(z, true, p);
            let (neg, _) = focal_term(z, false, p);
            assert!((pos - (-0.25 * s.ln())).abs() < 1e-12);
            assert!((neg - (-0.75 * (1.0 - s).ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logit_has_negligible_loss() {
        let (l, _) = focal_term(20.0f64, true, FocalParams::default());
        assert!(l < 1e-8);
        let (l, _) = focal_term(-20.0f64, false, FocalParams::default());
        assert!(l < 1e-8);
    }

    #[test]
    fn focal_term_gradient() {
        for &pos in &[true, false] {
            for &z in &[-4.0f64, -1.0, -0.1, 0.3, 2.5] {
                let f = |v: &[f64]| focal_term(v[0], pos, FocalParams::default()).0;
                let (_, g) = focal_term(z, pos, FocalParams::default());
                let r = check_gradient("focal", f, &[z], &[g], None, GradCheckConfig::default());
                assert!(r.passed, "{r:?}");
            }
        }
    }

    #[test]
    fn focal_permutes_with_locations() {
        let logits = Tensor4::from_vec([1, 1, 1, 3], vec![0.5f64, -1.0, 2.0]).unwrap();
        let swapped = Tensor4::from_vec([1, 1, 1, 3], vec![2.0f64, -1.0, 0.5]).unwrap();
        let (a, ga) = focal_loss(&logits, &[1, 0, 0], FocalParams::default());
        let (b, gb) = focal_loss(&swapped, &[0, 0, 1], FocalParams::default());
        assert!((a - b).abs() < 1e-15);
        assert_eq!(ga.data()[0], gb.data()[2]);
        assert_eq!(ga.data()[2], gb.data()[0]);
    }

    #[test]
    fn iou_loss_values() {
        assert_eq!(iou_loss([0.0f64, 0.0, 4.0, 4.0], [0.0, 0.0, 4.0, 4.0]).0, 0.0);
        let (l, g) = iou_loss([0.0f64, 0.0, 1.0, 1.0], [5.0, 5.0, 6.0, 6.0]);
        assert!((l - 1e7f64.ln()).abs() < 1e-12);
        assert_eq!(g, [0.0; 4]);
        let (l, _) = iou_loss([0.0f64, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 5.0]);
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn iou_loss_gradient() {
        let gt = [1.0, 2.0, 9.0, 7.5];
        for pred in [[0.3f64, 1.1, 6.0, 8.2], [2.0, 2.5, 10.0, 7.0], [1.5, 0.5, 8.0, 9.0]] {
            let (_, g) = iou_loss(pred, gt);
            let f = |v: &[f64]| iou_loss([v[0], v[1], v[2], v[3]], gt).0;
            let r = check_gradient("iou", f, &pred, &g, None, GradCheckConfig::default());
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn l1_values() {
        let p = [[0.1f64, 0.2, 0.3, 0.4]];
        assert_eq!(l1_border_loss(&p, &p).0, 0.0);
        let t = [[0.0f64, 0.1, 0.4, 0.5]];
        let (l, g) = l1_border_loss(&p, &t);
        assert!((l - 0.1).abs() < 1e-15);
        assert_eq!(g[0], [0.25, 0.25, -0.25, -0.25]);
        let (l, g) = l1_border_loss::<f64>(&[], &[]);
        assert_eq!(l, 0.0);
        assert!(g.is_empty());
    }
}
