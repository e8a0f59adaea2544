pub mod analysis;
pub mod bench;
pub mod commands;
pub mod config;
pub mod eval;
pub mod postprocess;

pub use analysis::{analyze_extreme_points, analyze_iou_histogram, ExtremeOptions, ExtremeReport, IouHistogram};
pub use config::{Config, DataConfig, Precision};
pub use eval::{evaluate, EvalReport};
pub use postprocess::{nms, postprocess, InferConfig, Stage};

use crate::detector::{BorderDet, Detection};
use crate::error::Result;
use crate::tensor::Real;
use crate::training::Dataset;

/// Detections for every image of `data`, for one stage.
pub fn detect_dataset<T: Real>(
    model: &BorderDet<T>,
    data: &Dataset,
    cfg: &InferConfig,
    stage: Stage,
) -> Result<Vec<Vec<Detection>>> {
    let mut all = Vec::with_capacity(data.len());
    analysis::for_each_batch(model, data, 16, |_, out, _| {
        all.extend(postprocess(out, cfg, stage));
        Ok(())
    })?;
    Ok(all)
}

/// Evaluates one stage of the model on a dataset.
pub fn evaluate_model<T: Real>(
    model: &BorderDet<T>,
    data: &Dataset,
    cfg: &InferConfig,
    stage: Stage,
) -> Result<EvalReport> {
    let dets = detect_dataset(model, data, cfg, stage)?;
    let gts: Vec<_> = data.samples.iter().map(|s| s.objects.clone()).collect();
    evaluate(&dets, &gts, model.config().num_classes)
}
