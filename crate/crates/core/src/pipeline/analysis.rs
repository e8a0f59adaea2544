//! Diagnostics: where BorderAlign's argmax samples land relative to object
//! extreme points, and how box quality shifts between the two stages.

use serde::{Deserialize, Serialize};

use crate::border_align::Border;
use crate::detector::{image_to_feature, iou, BorderDet, ForwardCache, HeadOutputs};
use crate::error::Result;
use crate::pipeline::eval::{iou_bucket, BUCKET_EDGES};
use crate::pipeline::postprocess::{candidates, InferConfig};
use crate::tensor::Real;
use crate::training::{assign_border_targets, Dataset, GtObject, ShapeKind};

/// Runs the model over the dataset in fixed-size chunks.
pub fn for_each_batch<T: Real>(
    model: &BorderDet<T>,
    data: &Dataset,
    batch_size: usize,
    mut f: impl FnMut(&[Vec<GtObject>], &HeadOutputs<T>, &ForwardCache<T>) -> Result<()>,
) -> Result<()> {
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, gts) = data.batch::<T>(chunk)?;
        let (out, cache) = model.forward(&images)?;
        f(&gts, &out, &cache)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouHistogram {
    pub edges: Vec<f64>,
    pub coarse: [usize; 5],
    pub refined: [usize; 5],
    /// Candidate locations considered (including those below IoU 0.5).
    pub locations: usize,
}

impl Default for IouHistogram {
    fn default() -> Self {
        Self { edges: BUCKET_EDGES.to_vec(), coarse: [0; 5], refined: [0; 5], locations: 0 }
    }
}

impl IouHistogram {
    /// Adds the candidate locations of one batch: every location whose best
    /// class clears the inference score threshold contributes its coarse box
    /// and its refined box, each scored by the best IoU over all objects.
    pub fn accumulate<T: Real>(&mut self, out: &HeadOutputs<T>, gts: &[Vec<GtObject>], cfg: &InferConfig) {
        let cfg = InferConfig { top_k: usize::MAX, ..cfg.clone() };
        for (b, objs) in gts.iter().enumerate() {
            let mut seen = std::collections::BTreeSet::new();
            for (y, x, _) in candidates(out, b, &cfg) {
                if !seen.insert((y, x)) {
                    continue;
                }
                self.locations += 1;
                let best = |bx: [T; 4]| {
                    let bx = bx.map(|v| v.to_f64_lossy());
                    objs.iter().map(|o| iou(bx, o.bbox)).fold(0.0, f64::max)
                };
                if let Some(i) = iou_bucket(best(out.coarse_box(b, y, x))) {
                    self.coarse[i] += 1;
                }
                if let Some(i) = iou_bucket(best(out.refined_box(b, y, x))) {
                    self.refined[i] += 1;
                }
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket_lo,bucket_hi,coarse,refined\n");
        for i in 0..5 {
            s.push_str(&format!("{:.1},{:.1},{},{}\n", self.edges[i], self.edges[i + 1], self.coarse[i], self.refined[i]));
        }
        s
    }
}

pub fn analyze_iou_histogram<T: Real>(
    model: &BorderDet<T>,
    data: &Dataset,
    cfg: &InferConfig,
) -> Result<IouHistogram> {
    let mut h = IouHistogram::default();
    for_each_batch(model, data, 16, |gts, out, _| {
        h.accumulate(out, gts, cfg);
        Ok(())
    })?;
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtremeOptions {
    /// Restrict to one kind of object.
    pub shape: Option<ShapeKind>,
    pub iou_thresh: f64,
    pub bins: usize,
}

impl Default for ExtremeOptions {
    fn default() -> Self {
        Self { shape: Some(ShapeKind::Ellipse), iou_thresh: 0.6, bins: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeReport {
    /// `bins + 1` edges spanning `[-1, 1]`; values outside are clamped into
    /// the end bins.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub samples: usize,
    pub mean_abs: f64,
    /// Mean |distance| for left, top, right, bottom.
    pub per_border_mean_abs: [f64; 4],
}

impl ExtremeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{:.3},{:.3},{c}\n", self.edges[i], self.edges[i + 1]));
        }
        s
    }
}

/// Signed distance along a border from a sample to an extreme point,
/// normalised by the border length. Both points are in the same
/// coordinate frame; `None` for zero-length borders.
pub fn normalized_border_distance(bx: [f64; 4], border: Border, sample: [f64; 2], extreme: [f64; 2]) -> Option<f64> {
    let (axis, len) = if border.is_vertical() { (1, bx[3] - bx[1]) } else { (0, bx[2] - bx[0]) };
    (len > 0.0).then(|| (sample[axis] - extreme[axis]) / len)
}

#[derive(Debug, Default, Clone)]
pub struct ExtremeAccumulator {
    distances: Vec<f64>,
    per_border: [(f64, usize); 4],
}

impl ExtremeAccumulator {
    /// Adds every regression-branch argmax sample at border-positive
    /// locations of one batch.
    pub fn accumulate<T: Real>(
        &mut self,
        out: &HeadOutputs<T>,
        cache: &ForwardCache<T>,
        gts: &[Vec<GtObject>],
        opts: &ExtremeOptions,
    ) {
        let sigma = out.sigma.to_f64_lossy();
        let targets = assign_border_targets(&out.coarse_boxes, gts, opts.iou_thresh, sigma);
        let bam = cache.reg_bam();
        let rec = &bam.argmax;
        let (gh, gw) = out.grid();
        for (b, objs) in gts.iter().enumerate() {
            for y in 0..gh {
                for x in 0..gw {
                    let Some(gi) = targets.matched[(b * gh + y) * gw + x] else { continue };
                    let obj = &objs[gi];
                    if opts.shape.is_some_and(|s| s != obj.shape) {
                        continue;
                    }
                    let fb = bam.boxes.get(b, y, x).map(|v| v.to_f64_lossy());
                    for border in Border::ALL {
                        let e = obj.extreme_points[border.index()].map(|v| image_to_feature(v, out.stride));
                        for c in 0..rec.channels {
                            let Some((_, s)) = rec.winner(b, border, c, y, x) else { continue };
                            let s = s.map(|v| v.to_f64_lossy());
                            if let Some(d) = normalized_border_distance(fb, border, s, e) {
                                self.distances.push(d);
                                let p = &mut self.per_border[border.index()];
                                p.0 += d.abs();
                                p.1 += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn report(&self, bins: usize) -> ExtremeReport {
        let bins = bins.max(1);
        let edges: Vec<f64> = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &d in &self.distances {
            let i = (((d + 1.0) / 2.0) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
            counts[i] += 1;
        }
        let n = self.distances.len();
        let mean_abs = if n == 0 { 0.0 } else { self.distances.iter().map(|d| d.abs()).sum::<f64>() / n as f64 };
        let per_border_mean_abs = self.per_border.map(|(s, n)| if n == 0 { 0.0 } else { s / n as f64 });
        ExtremeReport { edges, counts, samples: n, mean_abs, per_border_mean_abs }
    }
}

pub fn analyze_extreme_points<T: Real>(
    model: &BorderDet<T>,
    data: &Dataset,
    opts: &ExtremeOptions,
) -> Result<ExtremeReport> {
    let mut acc = ExtremeAccumulator::default();
    for_each_batch(model, data, 16, |gts, out, cache| {
        acc.accumulate(out, cache, gts, opts);
        Ok(())
    })?;
    Ok(acc.report(opts.bins))
}
