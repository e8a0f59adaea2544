//! BorderAlign: channel-wise max pooling of bilinear samples taken along the
//! four borders of the box predicted at every feature-map location.
//!
//! The input carries five channel blocks of width `C`, ordered
//! `(point, left, top, right, bottom)`. The point block is copied through.
//! Each border block `c` at `(i, j)` becomes the maximum of `N` samples of
//! the same channel taken along the matching border of the box predicted at
//! `(i, j)`. Sample `k` sits at `k/N` of the border span, so the far end of
//! each border is never sampled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::BilinearTap;
use crate::tensor::{Real, Tensor4};

/// Number of channel blocks in a border-sensitive feature map.
pub const BLOCKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Border {
    Left,
    Top,
    Right,
    Bottom,
}

impl Border {
    pub const ALL: [Border; 4] = [Border::Left, Border::Top, Border::Right, Border::Bottom];

    /// Position in the `(left, top, right, bottom)` order.
    pub fn index(self) -> usize {
        match self {
            Border::Left => 0,
            Border::Top => 1,
            Border::Right => 2,
            Border::Bottom => 3,
        }
    }

    /// Channel block holding this border (block 0 is the point feature).
    pub fn block(self) -> usize {
        self.index() + 1
    }

    /// Left/right borders run vertically.
    pub fn is_vertical(self) -> bool {
        matches!(self, Border::Left | Border::Right)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Samples per border. `0` disables border pooling entirely: border
    /// blocks come out as zeros and only the point block carries signal.
    pub pool_size: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { pool_size: 10 }
    }
}

/// Location of sample `k` of `n` on one border of `(x0, y0, x1, y1)`.
#[inline]
pub fn border_sample_coords<T: Real>(bx: [T; 4], border: Border, k: usize, n: usize) -> (T, T) {
    let [x0, y0, x1, y1] = bx;
    let kf = T::lit(k as f64);
    let nf = T::lit(n as f64);
    let w = x1 - x0;
    let h = y1 - y0;
    match border {
        Border::Left => (x0, y0 + kf * h / nf),
        Border::Top => (x0 + kf * w / nf, y0),
        Border::Right => (x1, y0 + kf * h / nf),
        Border::Bottom => (x0 + kf * w / nf, y1),
    }
}

/// Per-location boxes `(x0, y0, x1, y1)` in continuous feature-map
/// coordinates, stored as a `(batch, 4, H, W)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxField<T> {
    boxes: Tensor4<T>,
}

impl<T: Real> BoxField<T> {
    pub fn new(boxes: Tensor4<T>) -> Result<Self> {
        if boxes.channels() != 4 {
            return Err(Error::shape(format!(
                "box field needs 4 channels, got {}",
                boxes.channels()
            )));
        }
        for b in 0..boxes.batch() {
            for y in 0..boxes.height() {
                for x in 0..boxes.width() {
                    let [x0, y0, x1, y1] =
                        [0, 1, 2, 3].map(|c| boxes.at(b, c, y, x));
                    if !(x1 >= x0 && y1 >= y0) {
                        return Err(Error::Input(format!(
                            "box ({x0:?}, {y0:?}, {x1:?}, {y1:?}) at ({b}, {y}, {x}) is not well ordered"
                        )));
                    }
                }
            }
        }
        Ok(Self { boxes })
    }

    /// The same box at every location.
    pub fn uniform(batch: usize, height: usize, width: usize, bx: [T; 4]) -> Result<Self> {
        Self::new(Tensor4::from_fn([batch, 4, height, width], |[_, c, _, _]| bx[c]))
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize) -> [T; 4] {
        [0, 1, 2, 3].map(|c| self.boxes.at(b, c, y, x))
    }

    pub fn tensor(&self) -> &Tensor4<T> {
        &self.boxes
    }

    pub fn into_tensor(self) -> Tensor4<T> {
        self.boxes
    }

    pub fn batch(&self) -> usize {
        self.boxes.batch()
    }

    pub fn height(&self) -> usize {
        self.boxes.height()
    }

    pub fn width(&self) -> usize {
        self.boxes.width()
    }
}

/// Winning sample per pooled slot, laid out `[batch][border][channel][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArgmaxRecord<T> {
    pub batch: usize,
    /// Channels per block (`C`).
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pool_size: usize,
    index: Vec<u32>,
    coords: Vec<[T; 2]>,
}

impl<T: Real> ArgmaxRecord<T> {
    #[inline]
    pub fn slot(&self, b: usize, border: Border, c: usize, y: usize, x: usize) -> usize {
        (((b * 4 + border.index()) * self.channels + c) * self.height + y) * self.width + x
    }

    /// Winning `k` and its (unclamped) sample coordinates, or `None` when
    /// pooling is disabled.
    pub fn winner(&self, b: usize, border: Border, c: usize, y: usize, x: usize) -> Option<(usize, [T; 2])> {
        if self.pool_size == 0 {
            return None;
        }
        let s = self.slot(b, border, c, y, x);
        Some((self.index[s] as usize, self.coords[s]))
    }

    pub fn pooled_shape(&self) -> [usize; 4] {
        [self.batch, BLOCKS * self.channels, self.height, self.width]
    }
}

fn block_width(channels: usize) -> Result<usize> {
    if channels % BLOCKS != 0 || channels == 0 {
        return Err(Error::shape(format!(
            "border align needs a positive multiple of {BLOCKS} channels, got {channels}"
        )));
    }
    Ok(channels / BLOCKS)
}

fn check_boxes<T: Real>(input: [usize; 4], boxes: &BoxField<T>) -> Result<()> {
    let [b, _, h, w] = input;
    if boxes.batch() != b || boxes.height() != h || boxes.width() != w {
        return Err(Error::shape(format!(
            "boxes {:?} not aligned with features {:?}",
            boxes.tensor().shape(),
            input
        )));
    }
    Ok(())
}

pub fn border_align_forward<T: Real>(
    input: &Tensor4<T>,
    boxes: &BoxField<T>,
    cfg: PoolConfig,
) -> Result<(Tensor4<T>, ArgmaxRecord<T>)> {
    let [batch, channels, h, w] = input.shape();
    let cb = block_width(channels)?;
    check_boxes(input.shape(), boxes)?;
    let n = cfg.pool_size;
    let plane = h * w;
    let mut out = Tensor4::zeros(input.shape());
    let slots_per_item = if n == 0 { 0 } else { 4 * cb * plane };
    let mut index = vec![0u32; batch * slots_per_item];
    let mut coords = vec![[T::zero(); 2]; batch * slots_per_item];

    if n == 0 {
        for b in 0..batch {
            let o = b * channels * plane;
            out.data_mut()[o..o + cb * plane].copy_from_slice(&input.item(b)[..cb * plane]);
        }
    } else if !out.is_empty() {
        out.data_mut()
            .par_chunks_mut(channels * plane)
            .zip(index.par_chunks_mut(slots_per_item))
            .zip(coords.par_chunks_mut(slots_per_item))
            .enumerate()
            .for_each(|(b, ((dst, idx), crd))| {
                let src = input.item(b);
                dst[..cb * plane].copy_from_slice(&src[..cb * plane]);
                let mut taps = Vec::with_capacity(n);
                let mut pts = Vec::with_capacity(n);
                for y in 0..h {
                    for x in 0..w {
                        let bx = boxes.get(b, y, x);
                        for border in Border::ALL {
                            taps.clear();
                            pts.clear();
                            for k in 0..n {
                                let (sx, sy) = border_sample_coords(bx, border, k, n);
                                taps.push(BilinearTap::new(h, w, sx, sy));
                                pts.push([sx, sy]);
                            }
                            let block = border.block();
                            for c in 0..cb {
                                let ch = block * cb + c;
                                let p = &src[ch * plane..(ch + 1) * plane];
                                let mut best = taps[0].sample(p);
                                let mut best_k = 0;
                                for (k, tap) in taps.iter().enumerate().skip(1) {
                                    let v = tap.sample(p);
                                    if v > best {
                                        best = v;
                                        best_k = k;
                                    }
                                }
                                dst[ch * plane + y * w + x] = best;
                                let s = ((border.index() * cb + c) * h + y) * w + x;
                                idx[s] = best_k as u32;
                                crd[s] = pts[best_k];
                            }
                        }
                    }
                }
            });
    }

    let rec = ArgmaxRecord { batch, channels: cb, height: h, width: w, pool_size: n, index, coords };
    Ok((out, rec))
}

/// Routes each pooled gradient to the four grid neighbours of its winning
/// sample. Box coordinates are treated as constants.
pub fn border_align_backward<T: Real>(
    grad_out: &Tensor4<T>,
    rec: &ArgmaxRecord<T>,
    boxes: &BoxField<T>,
    input_shape: [usize; 4],
) -> Result<Tensor4<T>> {
    let expected = rec.pooled_shape();
    if input_shape != expected {
        return Err(Error::shape(format!(
            "input shape {input_shape:?} does not match argmax record {expected:?}"
        )));
    }
    grad_out.expect_shape(expected, "border_align_backward grad")?;
    check_boxes(input_shape, boxes)?;
    let [_, channels, h, w] = input_shape;
    let cb = rec.channels;
    let n = rec.pool_size;
    let plane = h * w;
    let mut grad_in = Tensor4::zeros(input_shape);
    if grad_in.is_empty() {
        return Ok(grad_in);
    }
    grad_in
        .data_mut()
        .par_chunks_mut(channels * plane)
        .enumerate()
        .for_each(|(b, dst)| {
            let g = grad_out.item(b);
            dst[..cb * plane].copy_from_slice(&g[..cb * plane]);
            if n == 0 {
                return;
            }
            for y in 0..h {
                for x in 0..w {
                    let bx = boxes.get(b, y, x);
                    for border in Border::ALL {
                        let block = border.block();
                        for c in 0..cb {
                            let ch = block * cb + c;
                            let upstream = g[ch * plane + y * w + x];
                            if upstream == T::zero() {
                                continue;
                            }
                            let k = rec.index[rec.slot(b, border, c, y, x)] as usize;
                            let (sx, sy) = border_sample_coords(bx, border, k, n);
                            let tap = BilinearTap::new(h, w, sx, sy);
                            tap.scatter(&mut dst[ch * plane..(ch + 1) * plane], upstream);
                        }
                    }
                }
            }
        });
    Ok(grad_in)
}

/// Alternative aggregation rules, kept for ablation runs only.
#[cfg(feature = "ablation")]
pub mod ablation {
    use super::*;

    /// Channel-wise average of the `N` border samples instead of the max.
    pub fn border_avg_forward<T: Real>(
        input: &Tensor4<T>,
        boxes: &BoxField<T>,
        cfg: PoolConfig,
    ) -> Result<Tensor4<T>> {
        let [batch, channels, h, w] = input.shape();
        let cb = block_width(channels)?;
        check_boxes(input.shape(), boxes)?;
        let n = cfg.pool_size;
        let mut out = input.clone();
        for b in 0..batch {
            for y in 0..h {
                for x in 0..w {
                    let bx = boxes.get(b, y, x);
                    for border in Border::ALL {
                        for c in 0..cb {
                            let ch = border.block() * cb + c;
                            let p = input.plane(b, ch);
                            let mut acc = T::zero();
                            for k in 0..n {
                                let (sx, sy) = border_sample_coords(bx, border, k, n);
                                acc += BilinearTap::new(h, w, sx, sy).sample(p);
                            }
                            let v = if n == 0 { T::zero() } else { acc / T::lit(n as f64) };
                            out.set(b, ch, y, x, v);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Border-wise max: the sample position is chosen on the channel-mean
    /// map and every channel of the block is read at that single position.
    pub fn border_wise_max_forward<T: Real>(
        input: &Tensor4<T>,
        boxes: &BoxField<T>,
        cfg: PoolConfig,
    ) -> Result<Tensor4<T>> {
        let [batch, channels, h, w] = input.shape();
        let cb = block_width(channels)?;
        check_boxes(input.shape(), boxes)?;
        let n = cfg.pool_size;
        let mut out = input.clone();
        for b in 0..batch {
            for border in Border::ALL {
                let block = border.block();
                let mut mean = vec![T::zero(); h * w];
                for c in 0..cb {
                    for (m, &v) in mean.iter_mut().zip(input.plane(b, block * cb + c)) {
                        *m += v / T::lit(cb as f64);
                    }
                }
                for y in 0..h {
                    for x in 0..w {
                        let bx = boxes.get(b, y, x);
                        let mut best: Option<(T, BilinearTap<T>)> = None;
                        for k in 0..n {
                            let (sx, sy) = border_sample_coords(bx, border, k, n);
                            let tap = BilinearTap::new(h, w, sx, sy);
                            let v = tap.sample(&mean);
                            if best.as_ref().map_or(true, |(bv, _)| v > *bv) {
                                best = Some((v, tap));
                            }
                        }
                        for c in 0..cb {
                            let ch = block * cb + c;
                            let v = best
                                .as_ref()
                                .map_or(T::zero(), |(_, tap)| tap.sample(input.plane(b, ch)));
                            out.set(b, ch, y, x, v);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::oracles::border_align_oracle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sample_coords_follow_k_over_n_spacing() {
        let bx = [0.0f64, 0.0, 10.0, 10.0];
        assert_eq!(border_sample_coords(bx, Border::Left, 0, 10), (0.0, 0.0));
        assert_eq!(border_sample_coords(bx, Border::Top, 9, 10), (9.0, 0.0));
        assert_eq!(border_sample_coords(bx, Border::Right, 3, 10), (10.0, 3.0));
        assert_eq!(border_sample_coords(bx, Border::Bottom, 5, 10), (5.0, 10.0));
        let degenerate = [2.0f64, 4.0, 2.0, 4.0];
        for border in Border::ALL {
            for k in 0..10 {
                assert_eq!(border_sample_coords(degenerate, border, k, 10), (2.0, 4.0));
            }
        }
    }

    #[test]
    fn constant_input_stays_constant() {
        let input = Tensor4::full([2, 10, 4, 5], 3.5f64);
        let boxes = BoxField::uniform(2, 4, 5, [-1.0, 0.5, 6.0, 2.5]).unwrap();
        let (out, _) = border_align_forward(&input, &boxes, PoolConfig::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn left_border_on_column_gradient() {
        // value grows with y in the left block; every location pools x = 0
        let input = Tensor4::from_fn([1, 5, 5, 5], |[_, c, y, x]| {
            if c == 1 { y as f64 * 1.5 + x as f64 } else { 0.0 }
        });
        let boxes = BoxField::uniform(1, 5, 5, [0.0, 0.0, 4.0, 4.0]).unwrap();
        let (out, rec) = border_align_forward(&input, &boxes, PoolConfig { pool_size: 10 }).unwrap();
        // last sample at y = 9·4/10 = 3.6 → 3.6·1.5 = 5.4
        for y in 0..5 {
            for x in 0..5 {
                assert!((out.at(0, 1, y, x) - 5.4).abs() < 1e-12);
                assert_eq!(rec.winner(0, Border::Left, 0, y, x).unwrap().0, 9);
            }
        }
        let oracle = border_align_oracle(&input, &boxes, 10);
        assert_eq!(out, oracle);
    }

    #[test]
    fn pool_size_one_reads_the_corner_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor4::from_fn([1, 5, 6, 6], |_| rng.gen_range(-1.0f64..1.0));
        let bx = [1.25, 0.5, 4.75, 3.5];
        let boxes = BoxField::uniform(1, 6, 6, bx).unwrap();
        let (out, _) = border_align_forward(&input, &boxes, PoolConfig { pool_size: 1 }).unwrap();
        let corners = [(1.25, 0.5), (1.25, 0.5), (4.75, 0.5), (1.25, 3.5)];
        for (i, &(cx, cy)) in corners.iter().enumerate() {
            let expect = crate::layers::bilinear_sample(&input, 0, i + 1, cx, cy).unwrap();
            assert_eq!(out.at(0, i + 1, 2, 2), expect);
        }
    }

    #[test]
    fn pool_size_zero_zeroes_border_blocks() {
        let input = Tensor4::full([1, 10, 3, 3], 1.0f32);
        let boxes = BoxField::uniform(1, 3, 3, [0.0, 0.0, 2.0, 2.0]).unwrap();
        let (out, rec) = border_align_forward(&input, &boxes, PoolConfig { pool_size: 0 }).unwrap();
        assert!(out.data()[..18].iter().all(|&v| v == 1.0));
        assert!(out.data()[18..].iter().all(|&v| v == 0.0));
        assert!(rec.winner(0, Border::Top, 0, 0, 0).is_none());
        let g = Tensor4::full([1, 10, 3, 3], 1.0f32);
        let gi = border_align_backward(&g, &rec, &boxes, input.shape()).unwrap();
        assert_eq!(gi.sum(), 18.0);
    }

    #[test]
    fn channel_count_must_divide_by_five() {
        let input = Tensor4::<f32>::zeros([1, 6, 3, 3]);
        let boxes = BoxField::uniform(1, 3, 3, [0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            border_align_forward(&input, &boxes, PoolConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn inverted_box_is_rejected() {
        let t = Tensor4::from_vec([1, 4, 1, 1], vec![3.0f32, 0.0, 1.0, 1.0]).unwrap();
        assert!(BoxField::new(t).is_err());
    }

    #[test]
    fn backward_zero_and_unit_cases() {
        let input = Tensor4::from_fn([1, 5, 4, 4], |[_, c, y, x]| (c * 16 + y * 4 + x) as f64);
        let boxes = BoxField::uniform(1, 4, 4, [0.0, 0.0, 2.0, 2.0]).unwrap();
        let cfg = PoolConfig { pool_size: 2 };
        let (_, rec) = border_align_forward(&input, &boxes, cfg).unwrap();
        let zero = Tensor4::zeros(input.shape());
        assert_eq!(border_align_backward(&zero, &rec, &boxes, input.shape()).unwrap(), zero);

        // top border samples (0,0) and (1,0); value grows with x so k=1 wins
        let mut g = Tensor4::zeros(input.shape());
        g.set(0, 2, 3, 1, 1.0);
        let gi = border_align_backward(&g, &rec, &boxes, input.shape()).unwrap();
        assert_eq!(gi.at(0, 2, 0, 1), 1.0);
        assert_eq!(gi.sum(), 1.0);
        assert_eq!(gi.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn backward_shape_mismatch() {
        let input = Tensor4::<f64>::zeros([1, 5, 4, 4]);
        let boxes = BoxField::uniform(1, 4, 4, [0.0, 0.0, 2.0, 2.0]).unwrap();
        let (_, rec) = border_align_forward(&input, &boxes, PoolConfig::default()).unwrap();
        let g = Tensor4::zeros([1, 10, 4, 4]);
        assert!(border_align_backward(&g, &rec, &boxes, [1, 10, 4, 4]).is_err());
    }

    fn random_case(seed: u64) -> (Tensor4<f64>, BoxField<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, c, h, w) = (2, 2, 5, 6);
        let input = Tensor4::from_fn([b, 5 * c, h, w], |_| rng.gen_range(-2.0..2.0));
        let boxes = Tensor4::from_fn([b, 4, h, w], |_| 0.0);
        let mut boxes = boxes;
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let x0: f64 = rng.gen_range(-2.0..5.0);
                    let y0: f64 = rng.gen_range(-2.0..4.0);
                    boxes.set(bi, 0, y, x, x0);
                    boxes.set(bi, 1, y, x, y0);
                    boxes.set(bi, 2, y, x, x0 + rng.gen_range(0.0..5.0));
                    boxes.set(bi, 3, y, x, y0 + rng.gen_range(0.0..4.0));
                }
            }
        }
        (input, BoxField::new(boxes).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn shift_equivariance(seed in 0u64..1000, alpha in -5.0f64..5.0) {
            let (input, boxes) = random_case(seed);
            let cfg = PoolConfig::default();
            let (a, _) = border_align_forward(&input, &boxes, cfg).unwrap();
            let (b, _) = border_align_forward(&input.map(|v| v + alpha), &boxes, cfg).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x + alpha - y).abs() < 1e-12);
            }
        }

        #[test]
        fn pooled_value_is_max_of_its_samples(seed in 0u64..1000) {
            let (input, boxes) = random_case(seed);
            let n = 10;
            let (out, rec) = border_align_forward(&input, &boxes, PoolConfig { pool_size: n }).unwrap();
            let [b, _, h, w] = input.shape();
            for bi in 0..b { for border in Border::ALL { for c in 0..2 { for y in 0..h { for x in 0..w {
                let ch = border.block() * 2 + c;
                let v = out.at(bi, ch, y, x);
                let bx = boxes.get(bi, y, x);
                let samples: Vec<f64> = (0..n).map(|k| {
                    let (sx, sy) = border_sample_coords(bx, border, k, n);
                    crate::layers::bilinear_sample(&input, bi, ch, sx, sy).unwrap()
                }).collect();
                prop_assert!(samples.iter().all(|&s| v >= s));
                let (k, _) = rec.winner(bi, border, c, y, x).unwrap();
                prop_assert_eq!(samples[k], v);
                // ties go to the lowest k
                prop_assert!(samples[..k].iter().all(|&s| s < v));
            }}}}}
        }

        #[test]
        fn batch_permutation_commutes(seed in 0u64..1000) {
            let (input, boxes) = random_case(seed);
            let cfg = PoolConfig::default();
            let (out, _) = border_align_forward(&input, &boxes, cfg).unwrap();
            let swap = |t: &Tensor4<f64>| Tensor4::stack(&[t.slice_batch(1, 2), t.slice_batch(0, 1)]).unwrap();
            let pboxes = BoxField::new(swap(boxes.tensor())).unwrap();
            let (pout, _) = border_align_forward(&swap(&input), &pboxes, cfg).unwrap();
            prop_assert_eq!(pout, swap(&out));
        }

        #[test]
        fn routed_gradient_conserves_mass(seed in 0u64..1000) {
            let (input, boxes) = random_case(seed);
            let (_, rec) = border_align_forward(&input, &boxes, PoolConfig::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let g = Tensor4::from_fn(input.shape(), |_| rng.gen_range(-1.0..1.0));
            let gi = border_align_backward(&g, &rec, &boxes, input.shape()).unwrap();
            for b in 0..2 {
                for ch in 0..10 {
                    let up: f64 = g.plane(b, ch).iter().sum();
                    let down: f64 = gi.plane(b, ch).iter().sum();
                    prop_assert!((up - down).abs() < 1e-12);
                }
            }
        }
    }
}
