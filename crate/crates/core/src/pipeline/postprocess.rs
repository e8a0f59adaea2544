//! Turning head outputs into detections.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detector::{combine_scores, iou, Detection, HeadOutputs};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    /// Minimum coarse probability for a `(location, class)` candidate.
    pub score_thresh: f64,
    /// Candidates kept per image before NMS, ranked by coarse probability.
    pub top_k: usize,
    pub nms_thresh: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { score_thresh: 0.05, top_k: 100, nms_thresh: 0.6 }
    }
}

/// Which stage's boxes and scores to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Coarse box, coarse probability.
    Coarse,
    /// Refined box, coarse × border probability.
    Refined,
}

/// Descending score, ties to the lower index.
fn by_score(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Greedy per-class NMS. The survivors come back sorted by descending
/// score (ties by input index); within a class no two overlap by more than
/// `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| by_score((a, dets[a].score), (b, dets[b].score)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class == d.class && iou(dets[k].bbox, d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

/// Pre-NMS candidates of image `b`: `(y, x, class)` with coarse probability
/// at least `score_thresh`, the best `top_k` by that probability.
pub fn candidates<T: Real>(out: &HeadOutputs<T>, b: usize, cfg: &InferConfig) -> Vec<(usize, usize, usize)> {
    let (gh, gw) = out.grid();
    let k = out.num_classes();
    let mut c = Vec::new();
    for y in 0..gh {
        for x in 0..gw {
            for class in 0..k {
                let p = out.coarse_prob(b, class, y, x).to_f64_lossy();
                if p >= cfg.score_thresh {
                    c.push(((y * gw + x) * k + class, p));
                }
            }
        }
    }
    c.sort_by(|&a, &b| by_score(a, b));
    c.truncate(cfg.top_k);
    c.into_iter().map(|(i, _)| (i / k / gw, (i / k) % gw, i % k)).collect()
}

/// Pre-NMS detections of image `b` for the chosen stage.
pub fn raw_detections<T: Real>(out: &HeadOutputs<T>, b: usize, cfg: &InferConfig, stage: Stage) -> Vec<Detection> {
    candidates(out, b, cfg)
        .into_iter()
        .map(|(y, x, class)| {
            let coarse = out.coarse_prob(b, class, y, x);
            let (score, bbox) = match stage {
                Stage::Coarse => (coarse, out.coarse_box(b, y, x)),
                Stage::Refined => (combine_scores(coarse, out.border_prob(b, class, y, x)), out.refined_box(b, y, x)),
            };
            Detection { class, score: score.to_f64_lossy(), bbox: bbox.map(|v| v.to_f64_lossy()) }
        })
        .collect()
}

/// Final detections for every image in the batch.
pub fn postprocess<T: Real>(out: &HeadOutputs<T>, cfg: &InferConfig, stage: Stage) -> Vec<Vec<Detection>> {
    (0..out.batch()).map(|b| nms(&raw_detections(out, b, cfg, stage), cfg.nms_thresh)).collect()
}
