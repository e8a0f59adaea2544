//! Border Alignment Module forward and backward on random features.
//!
//! cargo run --example bam

use borderdet::bam::{bam_backward, bam_forward, BamParams};
use borderdet::border_align::{BoxField, PoolConfig};
use borderdet::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> borderdet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (c, h, w) = (16, 8, 8);
    let feat = Tensor4::<f32>::from_fn([2, c, h, w], |_| rng.gen_range(-1.0..1.0));
    let mut params = BamParams::<f32>::new(c, &mut rng);
    let boxes = BoxField::uniform(2, h, w, [0.5, 1.0, 6.0, 5.5])?;

    for n in [0, 2, 10] {
        let (out, _) = bam_forward(&feat, &boxes, &params, PoolConfig { pool_size: n })?;
        println!("N={n:2}: output {:?}, max |y| {:.4}", out.shape(), out.max_abs());
    }

    let (out, cache) = bam_forward(&feat, &boxes, &params, PoolConfig::default())?;
    let g_feat = bam_backward(&out.map(|_| 1.0), &cache, &mut params)?;
    println!("|dL/dfeat|max {:.4}", g_feat.max_abs());
    println!("|dL/dexpand|max {:.4}", params.expand.grad_weight.max_abs());
    println!("|dL/dreduce|max {:.4}", params.reduce.grad_weight.max_abs());
    let gamma = params.norm.grad_gamma.iter().fold(0.0f32, |m, g| m.max(g.abs()));
    println!("|dL/dgamma|max {gamma:.4}");
    Ok(())
}
