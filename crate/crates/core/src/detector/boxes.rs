//! Axis-aligned box geometry shared by assignment, inference and evaluation.
//! Boxes are `[x0, y0, x1, y1]`.

use crate::tensor::Real;

pub fn area<T: Real>(b: [T; 4]) -> T {
    (b[2] - b[0]).max(T::zero()) * (b[3] - b[1]).max(T::zero())
}

pub fn iou<T: Real>(a: [T; 4], b: [T; 4]) -> T {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(T::zero());
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(T::zero());
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

/// Offsets of `target` relative to `coarse`, scaled by the coarse width or
/// height times `sigma`.
pub fn encode_offsets<T: Real>(coarse: [T; 4], target: [T; 4], sigma: T) -> [T; 4] {
    let sw = (coarse[2] - coarse[0]) * sigma;
    let sh = (coarse[3] - coarse[1]) * sigma;
    [
        (target[0] - coarse[0]) / sw,
        (target[1] - coarse[1]) / sh,
        (target[2] - coarse[2]) / sw,
        (target[3] - coarse[3]) / sh,
    ]
}

/// Applies border offsets to a coarse box; the inverse of [`encode_offsets`].
/// An inverted result is re-ordered.
pub fn combine_boxes<T: Real>(coarse: [T; 4], delta: [T; 4], sigma: T) -> [T; 4] {
    let sw = (coarse[2] - coarse[0]) * sigma;
    let sh = (coarse[3] - coarse[1]) * sigma;
    let x0 = coarse[0] + delta[0] * sw;
    let y0 = coarse[1] + delta[1] * sh;
    let x1 = coarse[2] + delta[2] * sw;
    let y1 = coarse[3] + delta[3] * sh;
    [x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1)]
}

/// Final detection confidence: coarse probability times border probability.
pub fn combine_scores<T: Real>(coarse_prob: T, border_prob: T) -> T {
    coarse_prob * border_prob
}

/// Box from distances `(l, t, r, b)` measured from the centre of feature
/// cell `(row, col)`, clamped to the image. Negative distances count as 0.
pub fn decode_coarse<T: Real>(
    row: usize,
    col: usize,
    dist: [T; 4],
    stride: usize,
    image_w: T,
    image_h: T,
) -> [T; 4] {
    let (cx, cy) = cell_center::<T>(row, col, stride);
    let d = dist.map(|v| v.max(T::zero()));
    let clamp = |v: T, hi: T| v.max(T::zero()).min(hi);
    [
        clamp(cx - d[0], image_w),
        clamp(cy - d[1], image_h),
        clamp(cx + d[2], image_w),
        clamp(cy + d[3], image_h),
    ]
}

/// Image-space centre of feature cell `(row, col)`.
pub fn cell_center<T: Real>(row: usize, col: usize, stride: usize) -> (T, T) {
    let s = T::lit(stride as f64);
    let half = T::lit(0.5);
    ((T::lit(col as f64) + half) * s, (T::lit(row as f64) + half) * s)
}

/// Image coordinate to continuous feature-map coordinate (cell centres at
/// integers).
pub fn image_to_feature<T: Real>(v: T, stride: usize) -> T {
    v / T::lit(stride as f64) - T::lit(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_hand_values() {
        assert_eq!(iou([0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 5.0]), 0.5);
        assert_eq!(iou([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]), 0.0);
        assert_eq!(iou([1.0f64, 1.0, 4.0, 4.0], [1.0, 1.0, 4.0, 4.0]), 1.0);
        assert_eq!(iou([1.0f64, 1.0, 1.0, 4.0], [1.0, 1.0, 1.0, 4.0]), 0.0);
    }

    #[test]
    fn encode_known_offsets() {
        let d = encode_offsets([0.0, 0.0, 10.0, 10.0], [1.0, 1.0, 11.0, 11.0], 0.5);
        assert_eq!(d, [0.2, 0.2, 0.2, 0.2]);
        let back = combine_boxes([0.0, 0.0, 10.0, 10.0], d, 0.5);
        assert_eq!(back, [1.0, 1.0, 11.0, 11.0]);
    }

    #[test]
    fn zero_delta_is_fixed_point() {
        let c = [1.25f32, -3.5, 7.75, 2.0];
        assert_eq!(combine_boxes(c, [0.0; 4], 0.5), c);
    }

    #[test]
    fn inverted_combination_is_reordered() {
        let out = combine_boxes([0.0, 0.0, 10.0, 10.0], [3.0, 0.0, -3.0, 0.0], 0.5);
        assert_eq!(out, [-5.0, 0.0, 15.0, 10.0]);
        let out = combine_boxes([0.0, 0.0, 10.0, 10.0], [2.5, 0.0, -2.5, 0.0], 0.5);
        assert!(out[0] <= out[2]);
    }

    #[test]
    fn score_product() {
        assert_eq!(combine_scores(1.0, 0.3), 0.3);
        assert_eq!(combine_scores(0.0, 0.7), 0.0);
        assert!((combine_scores(0.8f64, 0.5) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_coarse(0, 0, [4.0, 4.0, 4.0, 4.0], 8, 64.0, 64.0), [0.0, 0.0, 8.0, 8.0]);
        assert_eq!(decode_coarse(2, 3, [0.0f64; 4], 8, 64.0, 64.0), [28.0, 20.0, 28.0, 20.0]);
        assert_eq!(decode_coarse(2, 3, [-1.0f64, -2.0, 0.0, 0.0], 8, 64.0, 64.0), [28.0, 20.0, 28.0, 20.0]);
        // clamped to the image
        assert_eq!(decode_coarse(0, 7, [10.0, 10.0, 10.0, 10.0], 8, 64.0, 64.0), [50.0, 0.0, 64.0, 14.0]);
    }

    proptest! {
        #[test]
        fn combine_never_raises_coarse_score(c in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let s = combine_scores(c, b);
            prop_assert!(s <= c && (0.0..=1.0).contains(&s));
            prop_assert_eq!(s, combine_scores(b, c));
        }

        #[test]
        fn encode_combine_round_trip(
            x0 in -50.0f64..50.0, y0 in -50.0f64..50.0, w in 1.0f64..60.0, h in 1.0f64..60.0,
            t in proptest::array::uniform4(-40.0f64..40.0),
        ) {
            let coarse = [x0, y0, x0 + w, y0 + h];
            let target = [x0 + t[0], y0 + t[1], x0 + w + t[2].abs() + t[0], y0 + h + t[3].abs() + t[1]];
            let back = combine_boxes(coarse, encode_offsets(coarse, target, 0.5), 0.5);
            for i in 0..4 {
                prop_assert!((back[i] - target[i]).abs() < 1e-9);
            }
        }
    }
}
