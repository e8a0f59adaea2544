//! BorderAlign on a hand-built feature map: a single bright spot on the
//! left border wins the max, and the gradient flows back to the four texels
//! around the winning sample.
//!
//! cargo run --example border_align

use borderdet::border_align::{border_align_backward, border_align_forward, Border, BoxField, PoolConfig, BLOCKS};
use borderdet::Tensor4;

fn main() -> borderdet::Result<()> {
    let (h, w) = (8, 8);
    // one channel per block: point, left, top, right, bottom
    let mut feat = Tensor4::<f64>::zeros([1, BLOCKS, h, w]);
    feat.set(0, 0, 3, 3, 7.0);
    feat.set(0, Border::Left.block(), 5, 1, 2.0);
    feat.set(0, Border::Top.block(), 1, 4, -1.0);

    let boxes = BoxField::uniform(1, h, w, [1.0, 1.0, 6.0, 6.0])?;
    let (out, rec) = border_align_forward(&feat, &boxes, PoolConfig { pool_size: 10 })?;

    println!("point block copied through: {}", out.at(0, 0, 3, 3));
    for border in Border::ALL {
        let (k, at) = rec.winner(0, border, 0, 0, 0).expect("pooled");
        println!(
            "{border:?}: max {:+.3} from sample {k} at ({:.2}, {:.2})",
            out.at(0, border.block(), 0, 0),
            at[0],
            at[1]
        );
    }

    let mut grad = Tensor4::zeros(out.shape());
    grad.set(0, Border::Left.block(), 0, 0, 1.0);
    let g_in = border_align_backward(&grad, &rec, &boxes, feat.shape())?;
    println!("input texels receiving gradient from the left max:");
    for y in 0..h {
        for x in 0..w {
            let g = g_in.at(0, Border::Left.block(), y, x);
            if g != 0.0 {
                println!("  ({x}, {y}) {g:.3}");
            }
        }
    }
    Ok(())
}
