//! Trains on the synthetic shapes set and compares the two stages.
//!
//! cargo run --release --example train_synthetic -- [iterations] [pool_size] [seed]

use std::time::Instant;

use borderdet::detector::BorderDet;
use borderdet::pipeline::{analyze_extreme_points, analyze_iou_histogram, evaluate_model, Config, ExtremeOptions, Stage};
use borderdet::training::{generate_synthetic_dataset, train};

fn main() -> borderdet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = match args.get(3) {
        Some(s) => Config::default().with_seed(s.parse().expect("seed")),
        None => Config::default(),
    };
    if let Some(n) = args.get(1) {
        cfg.train.iterations = n.parse().expect("iterations");
    }
    if let Some(n) = args.get(2) {
        cfg.model.pool_size = n.parse().expect("pool size");
    }
    let d = &cfg.data;
    let train_set = generate_synthetic_dataset(d.seed, d.train_images, d.image_size, d.classes)?;
    let val_set = generate_synthetic_dataset(d.val_seed(), d.val_images, d.image_size, d.classes)?;

    let mut model = BorderDet::<f32>::new(cfg.model.clone())?;
    let opts = ExtremeOptions::default();
    let start = Instant::now();
    let log = train(&mut model, &train_set, &cfg.train, |rec, m| {
        if rec.iteration % cfg.train.log_every == 0 {
            let l = &rec.loss;
            println!(
                "iter {:5} lr {:.4} loss {:.4} (cc {:.3} cr {:.3} bc {:.3} br {:.3}) pos {}/{} [{:.0?}]",
                rec.iteration, rec.lr, l.total, l.coarse_cls, l.coarse_reg, l.border_cls, l.border_reg,
                l.coarse_positives, l.border_positives, start.elapsed()
            );
        }
        if rec.iteration == 100 {
            let r = analyze_extreme_points(m, &val_set, &opts).expect("analysis");
            println!("extreme points @100: mean |d| {:.4} over {} samples", r.mean_abs, r.samples);
        }
    })?;
    println!("trained {} iterations in {:.1?}", log.records.len(), start.elapsed());

    let r = analyze_extreme_points(&model, &val_set, &opts)?;
    println!("extreme points @end: mean |d| {:.4} over {} samples", r.mean_abs, r.samples);
    for stage in [Stage::Coarse, Stage::Refined] {
        let e = evaluate_model(&model, &val_set, &cfg.infer, stage)?;
        println!("{stage:?}: AP {:?} mAP {:.4} buckets {:?}", e.ap.iter().map(|a| (a * 1000.0).round() / 10.0).collect::<Vec<_>>(), e.mean_ap, e.iou_buckets);
    }
    let h = analyze_iou_histogram(&model, &val_set, &cfg.infer)?;
    println!("iou histogram coarse {:?} refined {:?}", h.coarse, h.refined);
    Ok(())
}
