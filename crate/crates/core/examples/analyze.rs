//! Extreme-point and IoU-histogram diagnostics for a checkpoint (or a
//! freshly initialised model when none is given).
//!
//! cargo run --release --example analyze -- [model.bdet]

use borderdet::detector::BorderDet;
use borderdet::pipeline::{analyze_extreme_points, analyze_iou_histogram, Config, ExtremeOptions, InferConfig};
use borderdet::training::{generate_synthetic_dataset, load_checkpoint};

fn main() -> borderdet::Result<()> {
    let cfg = Config::default();
    let model = match std::env::args().nth(1) {
        Some(p) => load_checkpoint::<f32>(p)?,
        None => BorderDet::<f32>::new(cfg.model.clone())?,
    };
    let val = generate_synthetic_dataset(cfg.data.val_seed(), cfg.data.val_images, 64, 2)?;

    let r = analyze_extreme_points(&model, &val, &ExtremeOptions::default())?;
    if r.samples == 0 {
        println!("no border-positive ellipse locations; pass a trained checkpoint");
    } else {
        println!("ellipse argmax samples: {}  mean |d| {:.4}", r.samples, r.mean_abs);
        println!("per border (L, T, R, B): {:.3?}", r.per_border_mean_abs);
        print!("{}", r.to_csv());
    }

    // low threshold so an untrained model still yields candidates
    let infer = InferConfig { score_thresh: 0.0, ..InferConfig::default() };
    let h = analyze_iou_histogram(&model, &val, &infer)?;
    println!("{} candidate locations", h.locations);
    print!("{}", h.to_csv());
    Ok(())
}
