//! Deliberately naive reference implementations. None of these share code
//! with the production kernels they check.

use crate::detector::Detection;
use crate::tensor::Tensor4;

/// Direct seven-deep loop cross-correlation with zero padding.
pub fn naive_conv2d(
    input: &Tensor4<f64>,
    weight: &Tensor4<f64>,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Tensor4<f64> {
    let [b, cin, h, w] = input.shape();
    let [cout, _, k, _] = weight.shape();
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let mut out = Tensor4::zeros([b, cout, ho, wo]);
    for bi in 0..b {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[o];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += weight.at(o, ci, ky, kx)
                                        * input.at(bi, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(bi, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Clamped bilinear interpolation written out longhand.
pub fn naive_bilinear(input: &Tensor4<f64>, b: usize, c: usize, x: f64, y: f64) -> f64 {
    let h = input.height();
    let w = input.width();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let xa = x.floor() as usize;
    let ya = y.floor() as usize;
    let xb = if xa + 1 < w { xa + 1 } else { w - 1 };
    let yb = if ya + 1 < h { ya + 1 } else { h - 1 };
    let lx = x - xa as f64;
    let ly = y - ya as f64;
    let hx = 1.0 - lx;
    let hy = 1.0 - ly;
    hy * hx * input.at(b, c, ya, xa)
        + hy * lx * input.at(b, c, ya, xb)
        + ly * hx * input.at(b, c, yb, xa)
        + ly * lx * input.at(b, c, yb, xb)
}

/// Double loop over slots and samples: copy the point block, and take the
/// max of `n` bilinear samples for each border channel.
pub fn border_align_oracle(
    input: &Tensor4<f64>,
    boxes: &crate::border_align::BoxField<f64>,
    n: usize,
) -> Tensor4<f64> {
    let [b, ch, h, w] = input.shape();
    let c = ch / 5;
    let mut out = Tensor4::zeros(input.shape());
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let t = boxes.tensor();
                let (x0, y0, x1, y1) = (t.at(bi, 0, y, x), t.at(bi, 1, y, x), t.at(bi, 2, y, x), t.at(bi, 3, y, x));
                let bw = x1 - x0;
                let bh = y1 - y0;
                for oc in 0..ch {
                    let block = oc / c;
                    let v = if block == 0 {
                        input.at(bi, oc, y, x)
                    } else if n == 0 {
                        0.0
                    } else {
                        let mut best = f64::NEG_INFINITY;
                        for k in 0..n {
                            let kf = k as f64;
                            let nf = n as f64;
                            let (sx, sy) = match block {
                                1 => (x0, y0 + kf * bh / nf),
                                2 => (x0 + kf * bw / nf, y0),
                                3 => (x1, y0 + kf * bh / nf),
                                _ => (x0 + kf * bw / nf, y1),
                            };
                            let s = naive_bilinear(input, bi, oc, sx, sy);
                            if s > best {
                                best = s;
                            }
                        }
                        best
                    };
                    out.set(bi, oc, y, x, v);
                }
            }
        }
    }
    out
}

fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let i = w * h;
    let u = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - i;
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

/// Exhaustive suppression: repeatedly take the best remaining detection
/// (highest score, then lowest index) and strike every same-class detection
/// overlapping it by more than `thresh`.
pub fn nms_oracle(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.map_or(true, |b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        for i in 0..dets.len() {
            if alive[i] && dets[i].class == dets[b].class && oracle_iou(dets[i].bbox, dets[b].bbox) > thresh {
                alive[i] = false;
            }
        }
        out.push(dets[b]);
    }
    out
}
