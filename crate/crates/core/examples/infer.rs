//! Short training run, checkpoint round trip, then detection and evaluation
//! of both stages.
//!
//! cargo run --release --example infer -- [iterations]

use borderdet::detector::BorderDet;
use borderdet::pipeline::{detect_dataset, evaluate_model, Config, Stage};
use borderdet::training::{generate_synthetic_dataset, load_checkpoint, save_checkpoint, train};

fn main() -> borderdet::Result<()> {
    let mut cfg = Config::default();
    cfg.train.iterations = std::env::args().nth(1).map_or(300, |s| s.parse().expect("iterations"));
    cfg.train.lr_steps = vec![cfg.train.iterations * 7 / 10, cfg.train.iterations * 9 / 10];
    let train_set = generate_synthetic_dataset(cfg.data.seed, 200, 64, 2)?;
    let val = generate_synthetic_dataset(cfg.data.val_seed(), 30, 64, 2)?;

    let mut model = BorderDet::<f32>::new(cfg.model.clone())?;
    let log = train(&mut model, &train_set, &cfg.train, |_, _| {})?;
    println!("loss {:.4} -> {:.4}", log.records[0].loss.total, log.records.last().unwrap().loss.total);

    let path = std::env::temp_dir().join("borderdet_example.bdet");
    save_checkpoint(&model, &path)?;
    let model = load_checkpoint::<f32>(&path)?;

    let dets = detect_dataset(&model, &val, &cfg.infer, Stage::Refined)?;
    for d in dets[0].iter().take(5) {
        println!("class {} score {:.3} box {:?}", d.class, d.score, d.bbox.map(|v| (v * 10.0).round() / 10.0));
    }
    println!("ground truth: {:?}", val.samples[0].objects.iter().map(|o| o.bbox).collect::<Vec<_>>());

    for stage in [Stage::Coarse, Stage::Refined] {
        let r = evaluate_model(&model, &val, &cfg.infer, stage)?;
        println!("{stage:?}: mAP {:.3} AP50 {:.3} AP75 {:.3}", r.mean_ap, r.ap_at(0.5).unwrap(), r.ap_at(0.75).unwrap());
    }
    Ok(())
}
