//! Implementations behind the command-line tool. Every command reads the
//! resolved [`Config`] and writes its artefacts under `out_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::detector::{BorderDet, Detection};
use crate::error::{Error, Result};
use crate::pipeline::analysis::{analyze_extreme_points, analyze_iou_histogram, ExtremeOptions};
use crate::pipeline::bench::{bench, to_csv};
use crate::pipeline::config::{Config, Precision};
use crate::pipeline::eval::EvalReport;
use crate::pipeline::postprocess::{postprocess, Stage};
use crate::pipeline::{detect_dataset, evaluate_model};
use crate::tensor::{Real, Tensor4};
use crate::training::{generate_synthetic_dataset, load_checkpoint, save_checkpoint, train, Dataset, ShapeKind};
use crate::verify::suite::{run_all, VerifyReport};

pub const CHECKPOINT_FILE: &str = "model.bdet";

#[derive(Debug, Clone)]
pub struct Globals {
    pub config: Config,
    pub out_dir: PathBuf,
}

impl Globals {
    pub fn new(config: Option<&Path>, seed: Option<u64>, out_dir: Option<&Path>) -> Result<Self> {
        let mut config = match config {
            Some(p) => Config::load(p).map_err(|e| Error::Usage(format!("config {}: {e}", p.display())))?,
            None => Config::default(),
        };
        if let Some(s) = seed {
            config = config.with_seed(s);
        }
        let out_dir = out_dir.map_or_else(|| PathBuf::from("out"), Path::to_path_buf);
        fs::create_dir_all(&out_dir)?;
        Ok(Self { config, out_dir })
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.out_dir.join(name);
        fs::write(&p, contents)?;
        Ok(p)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        self.write(name, serde_json::to_string_pretty(value)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Loads `<root>/train` or `<root>/val`, or regenerates the split from the
/// data config when no root is given.
pub fn load_split(g: &Globals, root: Option<&Path>, split: Split) -> Result<Dataset> {
    let name = if split == Split::Train { "train" } else { "val" };
    match root {
        Some(r) => Dataset::load(r.join(name)),
        None => {
            let d = &g.config.data;
            let (seed, n) = match split {
                Split::Train => (d.seed, d.train_images),
                Split::Val => (d.val_seed(), d.val_images),
            };
            generate_synthetic_dataset(seed, n, d.image_size, d.classes)
        }
    }
}

pub fn generate_data(g: &Globals) -> Result<PathBuf> {
    let root = g.out_dir.join("data");
    for split in [Split::Train, Split::Val] {
        let data = load_split(g, None, split)?;
        data.save(root.join(if split == Split::Train { "train" } else { "val" }))?;
    }
    Ok(root)
}

#[derive(Debug, Clone, Serialize)]
pub struct PeriodicEval {
    pub iteration: usize,
    pub coarse_mean_ap: f64,
    pub refined_mean_ap: f64,
    pub coarse_ap75: f64,
    pub refined_ap75: f64,
}

fn periodic<T: Real>(model: &BorderDet<T>, val: &Dataset, g: &Globals, iteration: usize) -> Result<PeriodicEval> {
    let c = evaluate_model(model, val, &g.config.infer, Stage::Coarse)?;
    let r = evaluate_model(model, val, &g.config.infer, Stage::Refined)?;
    Ok(PeriodicEval {
        iteration,
        coarse_mean_ap: c.mean_ap,
        refined_mean_ap: r.mean_ap,
        coarse_ap75: c.ap_at(0.75).unwrap_or(0.0),
        refined_ap75: r.ap_at(0.75).unwrap_or(0.0),
    })
}

fn train_typed<T: Real>(g: &Globals, data: Option<&Path>, eval_every: usize, quiet: bool) -> Result<PathBuf> {
    let train_set = load_split(g, data, Split::Train)?;
    let val_set = load_split(g, data, Split::Val)?;
    let mut model = BorderDet::<T>::new(g.config.model.clone())?;
    let mut evals = Vec::new();
    let mut failure = None;
    let log_every = g.config.train.log_every.max(1);
    let log = train(&mut model, &train_set, &g.config.train, |rec, m| {
        if !quiet && rec.iteration % log_every == 0 {
            println!("iter {:5}  lr {:.2e}  loss {:.4}", rec.iteration, rec.lr, rec.loss.total);
        }
        if eval_every > 0 && rec.iteration % eval_every == 0 && failure.is_none() {
            match periodic(m, &val_set, g, rec.iteration) {
                Ok(e) => {
                    if !quiet {
                        println!("  val mAP coarse {:.4} refined {:.4}", e.coarse_mean_ap, e.refined_mean_ap);
                    }
                    evals.push(e);
                }
                Err(e) => failure = Some(e),
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    g.write("train_log.csv", log.to_csv())?;
    g.write_json("eval_log.json", &evals)?;
    g.write_json("config.json", &g.config)?;
    let path = g.out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &path)?;
    Ok(path)
}

/// Trains from scratch and writes the checkpoint, logs and resolved config.
pub fn train_command(g: &Globals, data: Option<&Path>, eval_every: usize, quiet: bool) -> Result<PathBuf> {
    match g.config.precision {
        Precision::F32 => train_typed::<f32>(g, data, eval_every, quiet),
        Precision::F64 => train_typed::<f64>(g, data, eval_every, quiet),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReports {
    pub coarse: EvalReport,
    pub refined: EvalReport,
}

fn eval_typed<T: Real>(g: &Globals, checkpoint: &Path, data: Option<&Path>) -> Result<StageReports> {
    let model = load_checkpoint::<T>(checkpoint)?;
    let val = load_split(g, data, Split::Val)?;
    let coarse = evaluate_model(&model, &val, &g.config.infer, Stage::Coarse)?;
    let refined = evaluate_model(&model, &val, &g.config.infer, Stage::Refined)?;
    Ok(StageReports { coarse, refined })
}

pub fn eval_command(g: &Globals, checkpoint: &Path, data: Option<&Path>) -> Result<StageReports> {
    let r = match g.config.precision {
        Precision::F32 => eval_typed::<f32>(g, checkpoint, data)?,
        Precision::F64 => eval_typed::<f64>(g, checkpoint, data)?,
    };
    g.write_json("eval.json", &r)?;
    g.write("eval_coarse.csv", r.coarse.to_csv())?;
    g.write("eval_refined.csv", r.refined.to_csv())?;
    Ok(r)
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageDetections {
    pub image: usize,
    pub detections: Vec<Detection>,
}

/// Runs detection on a `TNS4` image batch `(B, C, H, W)` or a dataset
/// directory, writing `detections.json`.
pub fn infer_command(g: &Globals, checkpoint: &Path, input: &Path, stage: Stage) -> Result<Vec<ImageDetections>> {
    let model = load_checkpoint::<f32>(checkpoint)?;
    let dets = if input.is_dir() {
        detect_dataset(&model, &Dataset::load(input)?, &g.config.infer, stage)?
    } else {
        let images = Tensor4::<f32>::load(input)?;
        let (out, _) = model.forward(&images)?;
        postprocess(&out, &g.config.infer, stage)
    };
    let out: Vec<ImageDetections> =
        dets.into_iter().enumerate().map(|(image, detections)| ImageDetections { image, detections }).collect();
    g.write_json("detections.json", &out)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    Extreme,
    Iou,
}

/// Writes the chosen analysis as CSV and JSON, returning the CSV path.
pub fn analyze_command(
    g: &Globals,
    kind: Analysis,
    checkpoint: &Path,
    data: Option<&Path>,
    shape: Option<ShapeKind>,
) -> Result<PathBuf> {
    let model = load_checkpoint::<f32>(checkpoint)?;
    let val = load_split(g, data, Split::Val)?;
    match kind {
        Analysis::Extreme => {
            let opts = ExtremeOptions { shape, ..ExtremeOptions::default() };
            let r = analyze_extreme_points(&model, &val, &opts)?;
            g.write_json("extreme_points.json", &r)?;
            g.write("extreme_points.csv", r.to_csv())
        }
        Analysis::Iou => {
            let h = analyze_iou_histogram(&model, &val, &g.config.infer)?;
            g.write_json("iou_histogram.json", &h)?;
            g.write("iou_histogram.csv", h.to_csv())
        }
    }
}

pub fn bench_command(g: &Globals, op: &str, batches: &[usize], pools: &[usize], repeats: usize) -> Result<PathBuf> {
    let rows = bench(op, batches, pools, repeats)?;
    g.write("bench.csv", to_csv(&rows))
}

pub fn verify_command(g: &Globals) -> Result<VerifyReport> {
    let r = run_all(g.config.train.seed)?;
    g.write_json("verify.json", &r)?;
    Ok(r)
}
