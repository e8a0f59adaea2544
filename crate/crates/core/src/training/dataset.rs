//! Synthetic shapes: noisy grey backgrounds with filled rectangles (class 0)
//! and ellipses (class 1), each with an exact box and exact extreme points.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

pub const MIN_IMAGE_SIZE: usize = 32;
pub const MIN_SHAPE_SIZE: f64 = 12.0;
const MANIFEST: &str = "manifest.json";
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

/// One annotated object. `extreme_points` are ordered left, top, right,
/// bottom and each lies on the matching side of `bbox`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub class: usize,
    pub shape: ShapeKind,
    pub bbox: [f64; 4],
    pub extreme_points: [[f64; 2]; 4],
}

impl GtObject {
    /// Rectangles use side midpoints as their extreme points.
    pub fn rectangle(class: usize, bbox: [f64; 4]) -> Self {
        let [x0, y0, x1, y1] = bbox;
        let (mx, my) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        Self {
            class,
            shape: ShapeKind::Rectangle,
            bbox,
            extreme_points: [[x0, my], [mx, y0], [x1, my], [mx, y1]],
        }
    }

    pub fn ellipse(class: usize, center: [f64; 2], radii: [f64; 2]) -> Self {
        let [cx, cy] = center;
        let [rx, ry] = radii;
        Self {
            class,
            shape: ShapeKind::Ellipse,
            bbox: [cx - rx, cy - ry, cx + rx, cy + ry],
            extreme_points: [[cx - rx, cy], [cx, cy - ry], [cx + rx, cy], [cx, cy + ry]],
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let [x0, y0, x1, y1] = self.bbox;
        match self.shape {
            ShapeKind::Rectangle => x >= x0 && x < x1 && y >= y0 && y < y1,
            ShapeKind::Ellipse => {
                let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
                let (rx, ry) = ((x1 - x0) / 2.0, (y1 - y0) / 2.0);
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(1, 1, S, S)` grey image.
    pub image: Tensor4<f32>,
    pub objects: Vec<GtObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    image_size: usize,
    records: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    image: String,
    objects: Vec<GtObject>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the chosen images into one batch.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor4<T>, Vec<Vec<GtObject>>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_size * self.image_size);
        let mut gts = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Index(format!("sample {i} of {}", self.samples.len())))?;
            data.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
            gts.push(s.objects.clone());
        }
        let img = Tensor4::from_vec([indices.len(), 1, self.image_size, self.image_size], data)?;
        Ok((img, gts))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images"))?;
        let mut records = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let name = format!("images/{i:06}.tns");
            s.image.save(dir.join(&name))?;
            records.push(Record { image: name, objects: s.objects.clone() });
        }
        let manifest = Manifest { image_size: self.image_size, records };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let shape = [1, 1, manifest.image_size, manifest.image_size];
        let samples = manifest
            .records
            .into_iter()
            .map(|r| {
                let image = Tensor4::<f32>::load(dir.join(&r.image))?;
                image.expect_shape(shape, &r.image)?;
                Ok(Sample { image, objects: r.objects })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { image_size: manifest.image_size, samples })
    }
}

fn overlaps(a: [f64; 4], b: [f64; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

fn render(size: usize, objects: &[GtObject], rng: &mut ChaCha8Rng) -> Tensor4<f32> {
    let background: f64 = rng.gen_range(0.0..0.2);
    let shades: Vec<f64> = objects.iter().map(|_| rng.gen_range(0.6..1.0)).collect();
    let step = 1.0 / SUPERSAMPLE as f64;
    Tensor4::from_fn([1, 1, size, size], |[_, _, y, x]| {
        let mut v = 0.0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let px = x as f64 + (sx as f64 + 0.5) * step;
                let py = y as f64 + (sy as f64 + 0.5) * step;
                v += objects.iter().zip(&shades).find(|(o, _)| o.contains(px, py)).map_or(background, |(_, &s)| s);
            }
        }
        let noise: f64 = rng.gen_range(-0.1..0.1);
        (v / (SUPERSAMPLE * SUPERSAMPLE) as f64 + noise) as f32
    })
}

/// Deterministic per `seed`. `classes` is 1 (rectangles only) or 2.
pub fn generate_synthetic_dataset(seed: u64, n_images: usize, image_size: usize, classes: usize) -> Result<Dataset> {
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::Input(format!("image_size must be at least {MIN_IMAGE_SIZE}, got {image_size}")));
    }
    if !(1..=2).contains(&classes) {
        return Err(Error::Input(format!("classes must be 1 or 2, got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = image_size as f64;
    let max_side = (0.6 * s).floor();
    let mut samples = Vec::with_capacity(n_images);
    for _ in 0..n_images {
        let wanted = rng.gen_range(1..=3);
        let mut objects: Vec<GtObject> = Vec::with_capacity(wanted);
        let mut attempts = 0;
        while objects.len() < wanted && attempts < 100 {
            attempts += 1;
            let w = rng.gen_range(MIN_SHAPE_SIZE..=max_side).round();
            let h = rng.gen_range(MIN_SHAPE_SIZE..=max_side).round();
            let x0 = rng.gen_range(0.0..=s - w).round();
            let y0 = rng.gen_range(0.0..=s - h).round();
            let class = rng.gen_range(0..classes);
            let obj = if class == 0 {
                GtObject::rectangle(0, [x0, y0, x0 + w, y0 + h])
            } else {
                GtObject::ellipse(1, [x0 + w / 2.0, y0 + h / 2.0], [w / 2.0, h / 2.0])
            };
            if objects.iter().all(|o| !overlaps(o.bbox, obj.bbox)) {
                objects.push(obj);
            }
        }
        let image = render(image_size, &objects, &mut rng);
        samples.push(Sample { image, objects });
    }
    Ok(Dataset { image_size, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bits() {
        let a = generate_synthetic_dataset(3, 5, 64, 2).unwrap();
        let b = generate_synthetic_dataset(3, 5, 64, 2).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(4, 5, 64, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ellipse_geometry() {
        let e = GtObject::ellipse(1, [32.0, 32.0], [10.0, 6.0]);
        assert_eq!(e.bbox, [22.0, 26.0, 42.0, 38.0]);
        assert_eq!(e.extreme_points[0], [22.0, 32.0]);
        assert_eq!(e.extreme_points[1], [32.0, 26.0]);
    }

    #[test]
    fn generator_contract() {
        let d = generate_synthetic_dataset(11, 40, 64, 2).unwrap();
        for s in &d.samples {
            assert!((1..=3).contains(&s.objects.len()));
            assert_eq!(s.image.shape(), [1, 1, 64, 64]);
            assert!(s.image.is_finite());
            for (i, o) in s.objects.iter().enumerate() {
                let [x0, y0, x1, y1] = o.bbox;
                assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 64.0 && y1 <= 64.0);
                assert!(x1 - x0 >= MIN_SHAPE_SIZE && y1 - y0 >= MIN_SHAPE_SIZE);
                let e = o.extreme_points;
                assert_eq!(e[0][0], x0);
                assert_eq!(e[1][1], y0);
                assert_eq!(e[2][0], x1);
                assert_eq!(e[3][1], y1);
                assert_eq!(o.class, usize::from(o.shape == ShapeKind::Ellipse));
                for other in &s.objects[i + 1..] {
                    assert!(!overlaps(o.bbox, other.bbox));
                }
            }
        }
    }

    #[test]
    fn small_images_rejected() {
        assert!(matches!(generate_synthetic_dataset(0, 1, 31, 2), Err(Error::Input(_))));
        assert!(matches!(generate_synthetic_dataset(0, 1, 64, 3), Err(Error::Input(_))));
    }

    #[test]
    fn single_class_is_rectangles() {
        let d = generate_synthetic_dataset(5, 10, 48, 1).unwrap();
        assert!(d.samples.iter().flat_map(|s| &s.objects).all(|o| o.shape == ShapeKind::Rectangle));
    }

    #[test]
    fn save_load_round_trip() {
        let d = generate_synthetic_dataset(9, 4, 32, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
    }

    #[test]
    fn missing_dataset_is_io_error() {
        assert!(matches!(Dataset::load("/nonexistent/borderdet"), Err(Error::Io(_))));
    }

    #[test]
    fn batch_stacks_images() {
        let d = generate_synthetic_dataset(2, 3, 32, 2).unwrap();
        let (img, gts) = d.batch::<f64>(&[2, 0]).unwrap();
        assert_eq!(img.shape(), [2, 1, 32, 32]);
        assert_eq!(gts[0], d.samples[2].objects);
        assert_eq!(img.at(1, 0, 5, 7), d.samples[0].image.at(0, 0, 5, 7) as f64);
        assert!(d.batch::<f32>(&[3]).is_err());
    }
}
