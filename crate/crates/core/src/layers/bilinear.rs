use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// The four grid neighbours of a continuous coordinate and their weights.
///
/// Offsets index into a single `(height, width)` plane. Coordinates are
/// clamped to `[0, w-1] × [0, h-1]` before the neighbours are chosen, so
/// weights are always non-negative and sum to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTap<T> {
    pub offsets: [usize; 4],
    pub weights: [T; 4],
}

impl<T: Real> BilinearTap<T> {
    pub fn new(height: usize, width: usize, x: T, y: T) -> Self {
        debug_assert!(height > 0 && width > 0);
        let max_x = T::lit((width - 1) as f64);
        let max_y = T::lit((height - 1) as f64);
        let x = x.max(T::zero()).min(max_x);
        let y = y.max(T::zero()).min(max_y);
        let xl = x.floor();
        let yl = y.floor();
        let lx = x - xl;
        let ly = y - yl;
        let hx = T::one() - lx;
        let hy = T::one() - ly;
        let x0 = xl.to_usize().unwrap_or(0);
        let y0 = yl.to_usize().unwrap_or(0);
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        Self {
            offsets: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
            weights: [hy * hx, hy * lx, ly * hx, ly * lx],
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        let [o0, o1, o2, o3] = self.offsets;
        let [w0, w1, w2, w3] = self.weights;
        w0 * plane[o0] + w1 * plane[o1] + w2 * plane[o2] + w3 * plane[o3]
    }

    /// Adds `grad` to the plane, distributed with the interpolation weights.
    #[inline]
    pub fn scatter(&self, plane: &mut [T], grad: T) {
        for (&o, &w) in self.offsets.iter().zip(&self.weights) {
            plane[o] += w * grad;
        }
    }
}

/// Bilinear interpolation of `input[b, c]` at the continuous point `(x, y)`.
pub fn bilinear_sample<T: Real>(input: &Tensor4<T>, b: usize, c: usize, x: T, y: T) -> Result<T> {
    if input.is_empty() {
        return Err(Error::shape("bilinear_sample on an empty tensor"));
    }
    if b >= input.batch() || c >= input.channels() {
        return Err(Error::Index(format!(
            "batch {b} / channel {c} outside shape {:?}",
            input.shape()
        )));
    }
    let tap = BilinearTap::new(input.height(), input.width(), x, y);
    Ok(tap.sample(input.plane(b, c)))
}
