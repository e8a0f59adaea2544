//! Target assignment for both prediction stages.

use crate::detector::boxes::{area, cell_center, encode_offsets, iou};
use crate::tensor::{Real, Tensor4};
use crate::training::dataset::GtObject;

/// Per-location coarse targets, flattened `[batch][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseTargets<T> {
    /// `0` is background, `k + 1` is class `k`.
    pub labels: Vec<usize>,
    /// Pixel distances `(l, t, r, b)` to the assigned box (zero for
    /// background).
    pub dists: Vec<[T; 4]>,
    pub grid: (usize, usize),
}

impl<T> CoarseTargets<T> {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// Per-location second-stage targets, flattened `[batch][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BorderTargets<T> {
    /// `0` is background, `k + 1` is class `k`.
    pub labels: Vec<usize>,
    /// Encoded offsets; only meaningful where `labels > 0`.
    pub offsets: Vec<[T; 4]>,
    /// Index of the best-matching ground truth, when it passed the threshold.
    pub matched: Vec<Option<usize>>,
}

impl<T> BorderTargets<T> {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// A cell centre is positive for the smallest-area ground truth that
/// strictly contains it; ties go to the earlier box.
pub fn assign_coarse_targets<T: Real>(
    grid: (usize, usize),
    stride: usize,
    gts: &[Vec<GtObject>],
) -> CoarseTargets<T> {
    let (gh, gw) = grid;
    let n = gts.len() * gh * gw;
    let mut labels = vec![0; n];
    let mut dists = vec![[T::zero(); 4]; n];
    for (b, objs) in gts.iter().enumerate() {
        for y in 0..gh {
            for x in 0..gw {
                let (cx, cy) = cell_center::<f64>(y, x, stride);
                let mut best: Option<(f64, usize)> = None;
                for (i, g) in objs.iter().enumerate() {
                    let d = [cx - g.bbox[0], cy - g.bbox[1], g.bbox[2] - cx, g.bbox[3] - cy];
                    if d.iter().all(|&v| v > 0.0) {
                        let a = area(g.bbox);
                        if best.map_or(true, |(ba, _)| a < ba) {
                            best = Some((a, i));
                        }
                    }
                }
                if let Some((_, i)) = best {
                    let g = &objs[i];
                    let idx = (b * gh + y) * gw + x;
                    labels[idx] = g.class + 1;
                    dists[idx] = [cx - g.bbox[0], cy - g.bbox[1], g.bbox[2] - cx, g.bbox[3] - cy].map(T::lit);
                }
            }
        }
    }
    CoarseTargets { labels, dists, grid }
}

/// Matches each coarse box (image coordinates, `(B, 4, H, W)`) to its
/// highest-IoU ground truth; positive when that IoU reaches `iou_thresh`.
pub fn assign_border_targets<T: Real>(
    coarse_boxes: &Tensor4<T>,
    gts: &[Vec<GtObject>],
    iou_thresh: f64,
    sigma: f64,
) -> BorderTargets<T> {
    let [batch, _, gh, gw] = coarse_boxes.shape();
    assert_eq!(batch, gts.len(), "one ground-truth list per image");
    let n = batch * gh * gw;
    let mut labels = vec![0; n];
    let mut offsets = vec![[T::zero(); 4]; n];
    let mut matched = vec![None; n];
    for (b, objs) in gts.iter().enumerate() {
        for y in 0..gh {
            for x in 0..gw {
                let cb = [0, 1, 2, 3].map(|c| coarse_boxes.at(b, c, y, x).to_f64_lossy());
                let mut best: Option<(f64, usize)> = None;
                for (i, g) in objs.iter().enumerate() {
                    let v = iou(cb, g.bbox);
                    if best.map_or(true, |(bv, _)| v > bv) {
                        best = Some((v, i));
                    }
                }
                if let Some((v, i)) = best {
                    if v >= iou_thresh && v > 0.0 {
                        let idx = (b * gh + y) * gw + x;
                        labels[idx] = objs[i].class + 1;
                        matched[idx] = Some(i);
                        offsets[idx] = encode_offsets(cb, objs[i].bbox, sigma).map(T::lit);
                    }
                }
            }
        }
    }
    BorderTargets { labels, offsets, matched }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(class: usize, bbox: [f64; 4]) -> GtObject {
        GtObject::rectangle(class, bbox)
    }

    #[test]
    fn center_point_gets_half_extents() {
        // cell (1, 1) with stride 8 is centred at (12, 12)
        let t = assign_coarse_targets::<f64>((4, 4), 8, &[vec![gt(1, [2.0, 4.0, 22.0, 20.0])]]);
        let idx = 4 + 1;
        assert_eq!(t.labels[idx], 2);
        assert_eq!(t.dists[idx], [10.0, 8.0, 10.0, 8.0]);
    }

    #[test]
    fn outside_everything_is_background() {
        let t = assign_coarse_targets::<f64>((4, 4), 8, &[vec![gt(0, [13.0, 13.0, 19.0, 19.0])]]);
        assert_eq!(t.num_positive(), 0);
    }

    #[test]
    fn nested_boxes_prefer_smaller() {
        let outer = gt(0, [0.0, 0.0, 32.0, 32.0]);
        let inner = gt(1, [8.0, 8.0, 16.0, 16.0]);
        let gts = vec![vec![outer.clone(), inner.clone()]];
        let t = assign_coarse_targets::<f64>((4, 4), 8, &gts);
        // brute-force check over every cell
        for y in 0..4 {
            for x in 0..4 {
                let (cx, cy) = cell_center::<f64>(y, x, 8);
                let inside = |b: [f64; 4]| cx > b[0] && cy > b[1] && cx < b[2] && cy < b[3];
                let expect = [&outer, &inner]
                    .iter()
                    .filter(|g| inside(g.bbox))
                    .min_by(|a, b| area(a.bbox).partial_cmp(&area(b.bbox)).unwrap())
                    .map_or(0, |g| g.class + 1);
                assert_eq!(t.labels[y * 4 + x], expect);
            }
        }
        assert_eq!(t.labels[4 + 1], 2);
    }

    #[test]
    fn exact_match_is_positive_with_zero_offsets() {
        let boxes = Tensor4::from_vec([1, 4, 1, 1], vec![3.0f64, 4.0, 20.0, 30.0]).unwrap();
        let t = assign_border_targets(&boxes, &[vec![gt(0, [3.0, 4.0, 20.0, 30.0])]], 0.6, 0.5);
        assert_eq!(t.labels, vec![1]);
        assert_eq!(t.offsets[0], [0.0; 4]);
        assert_eq!(t.matched[0], Some(0));
    }

    #[test]
    fn half_overlap_is_background() {
        let boxes = Tensor4::from_vec([1, 4, 1, 1], vec![0.0f64, 0.0, 10.0, 10.0]).unwrap();
        let t = assign_border_targets(&boxes, &[vec![gt(0, [0.0, 0.0, 10.0, 5.0])]], 0.6, 0.5);
        assert_eq!(t.labels, vec![0]);
    }

    #[test]
    fn shifted_box_offsets() {
        let boxes = Tensor4::from_vec([1, 4, 1, 1], vec![0.0f64, 0.0, 10.0, 10.0]).unwrap();
        let t = assign_border_targets(&boxes, &[vec![gt(1, [1.0, 1.0, 11.0, 11.0])]], 0.6, 0.5);
        // IoU = 81 / 119 ≈ 0.68
        assert_eq!(t.labels, vec![2]);
        assert_eq!(t.offsets[0], [0.2, 0.2, 0.2, 0.2]);
    }
}
