//! COCO-style average precision with 101-point interpolation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detector::{iou, Detection};
use crate::error::{Error, Result};
use crate::training::GtObject;

pub const REPORT_THRESHOLDS: [f64; 6] = [0.5, 0.6, 0.7, 0.75, 0.8, 0.9];
pub const BUCKET_EDGES: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// Class-averaged AP at each of `thresholds`.
    pub ap: Vec<f64>,
    /// AP averaged over classes and IoU 0.50:0.05:0.95.
    pub mean_ap: f64,
    /// Per-class AP over 0.50:0.05:0.95; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    /// Detections per best-IoU bucket `[0.5, 0.6) … [0.9, 1.0]`.
    pub iou_buckets: [usize; 5],
    pub num_detections: usize,
    pub num_ground_truth: usize,
}

impl EvalReport {
    pub fn ap_at(&self, thresh: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| (t - thresh).abs() < 1e-12).map(|i| self.ap[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (t, a) in self.thresholds.iter().zip(&self.ap) {
            s.push_str(&format!("ap{:.0},{a:.6}\n", t * 100.0));
        }
        s.push_str(&format!("mean_ap,{:.6}\n", self.mean_ap));
        for (c, a) in self.per_class_ap.iter().enumerate() {
            if let Some(a) = a {
                s.push_str(&format!("class{c}_ap,{a:.6}\n"));
            }
        }
        for (i, n) in self.iou_buckets.iter().enumerate() {
            s.push_str(&format!("bucket_{:.1}_{:.1},{n}\n", BUCKET_EDGES[i], BUCKET_EDGES[i + 1]));
        }
        s
    }
}

/// Bucket index of an IoU, if it is at least 0.5.
pub fn iou_bucket(v: f64) -> Option<usize> {
    if v < BUCKET_EDGES[0] {
        return None;
    }
    Some(BUCKET_EDGES[1..5].iter().filter(|&&e| v >= e).count())
}

/// Single-class AP. `dets` holds `(image, index within image, detection)`.
fn class_ap(dets: &[(usize, usize, &Detection)], gts: &[Vec<[f64; 4]>], thresh: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<&(usize, usize, &Detection)> = dets.iter().collect();
    order.sort_by(|a, b| {
        b.2.score.partial_cmp(&a.2.score).unwrap_or(Ordering::Equal).then((a.0, a.1).cmp(&(b.0, b.1)))
    });
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, &&(img, _, d)) in order.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts[img].iter().enumerate() {
            if taken[img][j] {
                continue;
            }
            let v = iou(d.bbox, *g);
            if v >= thresh && best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, j));
            }
        }
        if let Some((_, j)) = best {
            taken[img][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let r = r as f64 / (RECALL_POINTS - 1) as f64;
        // first rank reaching this recall
        let i = recall.partition_point(|&v| v < r);
        if i < precision.len() {
            sum += precision[i];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Evaluates per-image detections against per-image ground truth.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GtObject>], num_classes: usize) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::Input(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    if let Some(d) = dets.iter().flatten().find(|d| d.class >= num_classes) {
        return Err(Error::Input(format!("detection class {} out of range", d.class)));
    }
    let per_class_gts: Vec<Vec<Vec<[f64; 4]>>> = (0..num_classes)
        .map(|c| gts.iter().map(|g| g.iter().filter(|o| o.class == c).map(|o| o.bbox).collect()).collect())
        .collect();
    let per_class_dets: Vec<Vec<(usize, usize, &Detection)>> = (0..num_classes)
        .map(|c| {
            dets.iter()
                .enumerate()
                .flat_map(|(img, ds)| ds.iter().enumerate().map(move |(i, d)| (img, i, d)))
                .filter(|(_, _, d)| d.class == c)
                .collect()
        })
        .collect();
    let has_gt: Vec<bool> = per_class_gts.iter().map(|g| g.iter().any(|v| !v.is_empty())).collect();
    let class_mean = |t: f64| -> f64 {
        let aps: Vec<f64> = (0..num_classes)
            .filter(|&c| has_gt[c])
            .map(|c| class_ap(&per_class_dets[c], &per_class_gts[c], t))
            .collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    };
    let ap = REPORT_THRESHOLDS.iter().map(|&t| class_mean(t)).collect();
    let coco = coco_thresholds();
    let mean_ap = coco.iter().map(|&t| class_mean(t)).sum::<f64>() / coco.len() as f64;
    let per_class_ap = (0..num_classes)
        .map(|c| {
            has_gt[c].then(|| {
                coco.iter().map(|&t| class_ap(&per_class_dets[c], &per_class_gts[c], t)).sum::<f64>()
                    / coco.len() as f64
            })
        })
        .collect();
    let mut iou_buckets = [0usize; 5];
    for (ds, gs) in dets.iter().zip(gts) {
        for d in ds {
            let best = gs.iter().filter(|g| g.class == d.class).map(|g| iou(d.bbox, g.bbox)).fold(0.0, f64::max);
            if let Some(b) = iou_bucket(best) {
                iou_buckets[b] += 1;
            }
        }
    }
    Ok(EvalReport {
        thresholds: REPORT_THRESHOLDS.to_vec(),
        ap,
        mean_ap,
        per_class_ap,
        iou_buckets,
        num_detections: dets.iter().map(Vec::len).sum(),
        num_ground_truth: gts.iter().map(Vec::len).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(class: usize, score: f64, bbox: [f64; 4]) -> Detection {
        Detection { class, score, bbox }
    }

    fn rect(class: usize, bbox: [f64; 4]) -> GtObject {
        GtObject::rectangle(class, bbox)
    }

    #[test]
    fn perfect_detections() {
        let gts = vec![vec![rect(0, [0.0, 0.0, 10.0, 10.0]), rect(1, [20.0, 20.0, 30.0, 40.0])]];
        let dets = vec![gts[0].iter().map(|g| det(g.class, 1.0, g.bbox)).collect()];
        let r = evaluate(&dets, &gts, 2).unwrap();
        assert!(r.ap.iter().all(|&a| a == 1.0));
        assert_eq!(r.mean_ap, 1.0);
        assert_eq!(r.iou_buckets, [0, 0, 0, 0, 2]);
    }

    #[test]
    fn empty_detections() {
        let gts = vec![vec![rect(0, [0.0, 0.0, 10.0, 10.0])]];
        let r = evaluate(&[vec![]], &gts, 2).unwrap();
        assert!(r.ap.iter().all(|&a| a == 0.0));
        assert_eq!(r.per_class_ap, vec![Some(0.0), None]);
    }

    #[test]
    fn hand_computed_pr_curve() {
        // three objects; ranks: hit, duplicate of the first, hit; one object missed
        let g = [[0.0, 0.0, 10.0, 10.0], [20.0, 0.0, 30.0, 10.0], [40.0, 0.0, 50.0, 10.0]];
        let gts = vec![g.iter().map(|&b| rect(0, b)).collect()];
        let dets = vec![vec![det(0, 0.9, g[0]), det(0, 0.8, g[0]), det(0, 0.7, g[1])]];
        let r = evaluate(&dets, &gts, 1).unwrap();
        // precision envelope: 1 up to recall 1/3 (34 points), 2/3 up to recall 2/3 (33 points)
        let expected = (34.0 + 33.0 * (2.0 / 3.0)) / 101.0;
        for a in &r.ap {
            assert!((a - expected).abs() < 1e-12, "{a} vs {expected}");
        }
    }

    #[test]
    fn mismatched_ids() {
        assert!(matches!(evaluate(&[vec![], vec![]], &[vec![]], 1), Err(Error::Input(_))));
    }

    #[test]
    fn buckets() {
        assert_eq!(iou_bucket(0.49), None);
        assert_eq!(iou_bucket(0.5), Some(0));
        assert_eq!(iou_bucket(0.6), Some(1));
        assert_eq!(iou_bucket(0.95), Some(4));
        assert_eq!(iou_bucket(1.0), Some(4));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<Vec<GtObject>>)> {
        let bx = (0.0f64..40.0, 0.0f64..40.0, 2.0f64..20.0, 2.0f64..20.0).prop_map(|(x, y, w, h)| [x, y, x + w, y + h]);
        let image = (
            proptest::collection::vec((0usize..2, bx.clone()), 0..4),
            proptest::collection::vec((0usize..2, bx, 0.0f64..1.0), 0..6),
        );
        proptest::collection::vec(image, 1..4).prop_map(|imgs| {
            let gts = imgs.iter().map(|(g, _)| g.iter().map(|&(c, b)| rect(c, b)).collect()).collect();
            let dets = imgs.iter().map(|(_, d)| d.iter().map(|&(c, b, s)| det(c, s, b)).collect()).collect();
            (dets, gts)
        })
    }

    proptest! {
        #[test]
        fn ap_bounded_and_monotone((dets, gts) in arb_case()) {
            let r = evaluate(&dets, &gts, 2).unwrap();
            for w in r.ap.windows(2) {
                prop_assert!(w[0] >= w[1] - 1e-12);
            }
            prop_assert!(r.ap.iter().all(|a| (0.0..=1.0).contains(a)));
            prop_assert!((0.0..=1.0).contains(&r.mean_ap));
        }

        #[test]
        fn order_invariant((dets, gts) in arb_case()) {
            let reversed: Vec<Vec<Detection>> = dets.iter().map(|d| d.iter().rev().copied().collect()).collect();
            let a = evaluate(&dets, &gts, 2).unwrap();
            let b = evaluate(&reversed, &gts, 2).unwrap();
            // with continuous random scores ties have probability zero
            prop_assert_eq!(a, b);
        }
    }
}
