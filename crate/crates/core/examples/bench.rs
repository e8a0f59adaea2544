//! Relative timings: BorderAlign across pooling sizes and batch sizes, and
//! the full head at the default pooling size.
//!
//! cargo run --release --example bench

use borderdet::pipeline::bench::{bench, to_csv};

fn main() -> borderdet::Result<()> {
    let pooling = bench("border_align", &[1, 2, 4], &[0, 2, 4, 10, 32], 5)?;
    print!("{}", to_csv(&pooling));
    let head = bench("head_forward", &[1, 2, 4, 8], &[10], 3)?;
    print!("{}", to_csv(&head).lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
    Ok(())
}
