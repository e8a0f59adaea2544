//! Wall-clock timings of the main kernels (median of repeats after warmup).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bam::{bam_forward, BamParams};
use crate::border_align::{border_align_forward, BoxField, PoolConfig, BLOCKS};
use crate::detector::{BorderDet, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{conv2d_forward, ConvSpec, LayerParams};
use crate::tensor::Tensor4;
use crate::training::{compute_gradients, generate_synthetic_dataset, TrainConfig};

pub const OPS: [&str; 5] = ["border_align", "bam", "conv3x3", "head_forward", "train_step"];

/// Spatial extent and channel width used for the kernel-level ops.
const MAP: usize = 16;
const CHANNELS: usize = 32;
const WARMUP: usize = 2;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub op: String,
    pub batch: usize,
    pub pool_size: usize,
    pub repeats: usize,
    pub median_ms: f64,
    pub min_ms: f64,
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("op,batch,pool_size,repeats,median_ms,min_ms\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{:.4},{:.4}\n", r.op, r.batch, r.pool_size, r.repeats, r.median_ms, r.min_ms));
    }
    s
}

fn time(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..WARMUP {
        f()?;
    }
    let mut ms = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((ms[ms.len() / 2], ms[0]))
}

fn boxes(batch: usize, rng: &mut ChaCha8Rng) -> Result<BoxField<f32>> {
    let mut t = Tensor4::zeros([batch, 4, MAP, MAP]);
    for b in 0..batch {
        for y in 0..MAP {
            for x in 0..MAP {
                let (w, h) = (rng.gen_range(1.0..6.0f32), rng.gen_range(1.0..6.0f32));
                let (cx, cy) = (x as f32, y as f32);
                for (c, v) in [cx - w, cy - h, cx + w, cy + h].into_iter().enumerate() {
                    t.set(b, c, y, x, v);
                }
            }
        }
    }
    BoxField::new(t)
}

/// Times `op` for every batch size in `batches` and pooling size in `pools`
/// (ops without a pooling stage ignore `pools` and report 0).
pub fn bench(op: &str, batches: &[usize], pools: &[usize], repeats: usize) -> Result<Vec<BenchRow>> {
    if !OPS.contains(&op) {
        return Err(Error::Usage(format!("unknown op {op:?}; expected one of {}", OPS.join(", "))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pooled = !matches!(op, "conv3x3");
    let pools: Vec<usize> = if pooled { pools.to_vec() } else { vec![0] };
    let mut rows = Vec::new();
    for &batch in batches {
        for &n in &pools {
            let pool = PoolConfig { pool_size: n };
            let (median_ms, min_ms) = match op {
                "border_align" => {
                    let input = Tensor4::from_fn([batch, BLOCKS * CHANNELS, MAP, MAP], |_| rng.gen_range(-1.0f32..1.0));
                    let bx = boxes(batch, &mut rng)?;
                    time(repeats, || border_align_forward(&input, &bx, pool).map(drop))?
                }
                "bam" => {
                    let feat = Tensor4::from_fn([batch, CHANNELS, MAP, MAP], |_| rng.gen_range(-1.0f32..1.0));
                    let bx = boxes(batch, &mut rng)?;
                    let params = BamParams::<f32>::new(CHANNELS, &mut rng);
                    time(repeats, || bam_forward(&feat, &bx, &params, pool).map(drop))?
                }
                "conv3x3" => {
                    let input = Tensor4::from_fn([batch, CHANNELS, MAP, MAP], |_| rng.gen_range(-1.0f32..1.0));
                    let p = LayerParams::<f32>::kaiming(CHANNELS, CHANNELS, 3, &mut rng);
                    time(repeats, || conv2d_forward(&input, &p, ConvSpec::SAME3).map(drop))?
                }
                "head_forward" => {
                    let model = BorderDet::<f32>::new(ModelConfig { pool_size: n, ..ModelConfig::default() })?;
                    let data = generate_synthetic_dataset(0, batch, 64, 2)?;
                    let (img, _) = data.batch::<f32>(&(0..batch).collect::<Vec<_>>())?;
                    time(repeats, || model.forward(&img).map(drop))?
                }
                _ => {
                    let mut model = BorderDet::<f32>::new(ModelConfig { pool_size: n, ..ModelConfig::default() })?;
                    let data = generate_synthetic_dataset(0, batch, 64, 2)?;
                    let (img, gts) = data.batch::<f32>(&(0..batch).collect::<Vec<_>>())?;
                    let cfg = TrainConfig::default();
                    time(repeats, || compute_gradients(&mut model, &img, &gts, &cfg).map(drop))?
                }
            };
            rows.push(BenchRow {
                op: op.to_string(),
                batch,
                pool_size: if pooled { n } else { 0 },
                repeats,
                median_ms,
                min_ms,
            });
        }
    }
    Ok(rows)
}
