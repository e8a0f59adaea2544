//! Generates a small synthetic shapes set, writes it to disk and reads it
//! back.
//!
//! cargo run --example generate_data -- [out_dir]

use borderdet::training::{generate_synthetic_dataset, Dataset, ShapeKind};

fn main() -> borderdet::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "out/example_data".into());
    let data = generate_synthetic_dataset(7, 8, 64, 2)?;
    for (i, s) in data.samples.iter().take(3).enumerate() {
        for o in &s.objects {
            let kind = if o.shape == ShapeKind::Ellipse { "ellipse" } else { "rect" };
            println!("image {i}: {kind:<7} class {} box {:?} left extreme {:?}", o.class, o.bbox, o.extreme_points[0]);
        }
    }
    data.save(&dir)?;
    let back = Dataset::load(&dir)?;
    assert_eq!(back.len(), data.len());
    println!("wrote {} images to {dir}", back.len());
    Ok(())
}
