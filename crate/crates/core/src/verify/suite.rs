//! Randomised oracle and finite-difference checks, runnable as one suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bam::{bam_backward, bam_forward, BamParams};
use crate::border_align::{border_align_backward, border_align_forward, BoxField, PoolConfig, BLOCKS};
use crate::detector::{combine_boxes, encode_offsets, BorderDet, Detection, ModelConfig};
use crate::error::Result;
use crate::gradcheck::{check_gradient, sample_indices, GradCheckConfig, GradCheckReport};
use crate::layers::{
    conv2d_backward, conv2d_forward, instance_norm_backward, instance_norm_forward, relu, relu_backward,
    AffineParams, ConvSpec, HasParams, LayerParams, INSTANCE_NORM_EPS,
};
use crate::pipeline::eval::evaluate;
use crate::pipeline::postprocess::{nms, postprocess, InferConfig, Stage};
use crate::tensor::Tensor4;
use crate::training::{
    assign_border_targets, assign_coarse_targets, focal_loss, iou_loss, l1_border_loss, total_loss, FocalParams,
    GtObject,
};
use crate::verify::oracles::{border_align_oracle, nms_oracle};

pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

fn random_tensor(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random boxes in feature coordinates, some reaching outside the map.
pub fn random_boxes(batch: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> BoxField<f64> {
    let mut t = Tensor4::zeros([batch, 4, h, w]);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let x0 = rng.gen_range(-2.0..w as f64 + 1.0);
                let y0 = rng.gen_range(-2.0..h as f64 + 1.0);
                let bw = if rng.gen_bool(0.05) { 0.0 } else { rng.gen_range(0.0..w as f64 + 2.0) };
                let bh = if rng.gen_bool(0.05) { 0.0 } else { rng.gen_range(0.0..h as f64 + 2.0) };
                for (c, v) in [x0, y0, x0 + bw, y0 + bh].into_iter().enumerate() {
                    t.set(b, c, y, x, v);
                }
            }
        }
    }
    BoxField::new(t).expect("well-ordered by construction")
}

/// Forward output against the nested-loop oracle (bitwise), plus the
/// pass-through of the first channel block, over `instances` random cases.
pub fn oracle_equivalence(instances: usize, seed: u64) -> Result<[CheckOutcome; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    let mut identity_breaks = 0usize;
    for _ in 0..instances {
        let b = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=2);
        let h = rng.gen_range(1..=16);
        let w = rng.gen_range(1..=16);
        let n = [1, 2, 10][rng.gen_range(0..3)];
        let input = random_tensor([b, BLOCKS * c, h, w], -3.0, 3.0, &mut rng);
        let boxes = random_boxes(b, h, w, &mut rng);
        let (out, _) = border_align_forward(&input, &boxes, PoolConfig { pool_size: n })?;
        let expected = border_align_oracle(&input, &boxes, n);
        if out.data().iter().zip(expected.data()).any(|(a, e)| a.to_bits() != e.to_bits()) {
            mismatches += 1;
        }
        for bi in 0..b {
            for ch in 0..c {
                if out.plane(bi, ch).iter().zip(input.plane(bi, ch)).any(|(a, e)| a.to_bits() != e.to_bits()) {
                    identity_breaks += 1;
                }
            }
        }
    }
    Ok([
        CheckOutcome::new(
            "border_align_oracle",
            mismatches == 0,
            format!("{mismatches} of {instances} instances differ from the oracle"),
        ),
        CheckOutcome::new(
            "identity_block",
            identity_breaks == 0,
            format!("{identity_breaks} pass-through planes changed over {instances} instances"),
        ),
    ])
}

/// Encode followed by combine on random pairs with sides of at least 1.
pub fn round_trip(pairs: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let mut bx = || {
            let x0: f64 = rng.gen_range(-100.0..100.0);
            let y0: f64 = rng.gen_range(-100.0..100.0);
            [x0, y0, x0 + rng.gen_range(1.0..100.0), y0 + rng.gen_range(1.0..100.0)]
        };
        let coarse = bx();
        let target = bx();
        let back = combine_boxes(coarse, encode_offsets(coarse, target, 0.5), 0.5);
        for i in 0..4 {
            worst = worst.max((back[i] - target[i]).abs());
        }
    }
    CheckOutcome::new("offset_round_trip", worst < 1e-9, format!("max abs error {worst:.3e} over {pairs} pairs"))
}

fn random_detections(rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let n = rng.gen_range(0..25);
    (0..n)
        .map(|_| {
            let x0 = rng.gen_range(0.0..50.0);
            let y0 = rng.gen_range(0.0..50.0);
            // a coarse score grid makes ties common
            let score = rng.gen_range(0..20) as f64 / 20.0;
            Detection {
                class: rng.gen_range(0..3),
                score,
                bbox: [x0, y0, x0 + rng.gen_range(1.0..25.0), y0 + rng.gen_range(1.0..25.0)],
            }
        })
        .collect()
}

pub fn nms_against_oracle(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..instances {
        let d = random_detections(&mut rng);
        if nms(&d, 0.6) != nms_oracle(&d, 0.6) {
            failures += 1;
        }
    }
    CheckOutcome::new("nms_oracle", failures == 0, format!("{failures} of {instances} instances differ"))
}

/// Three objects; detections rank hit, duplicate, hit, leaving one object
/// unfound. The precision envelope is 1 up to recall 1/3 and 2/3 up to
/// recall 2/3, so 34 recall points score 1 and 33 score 2/3.
pub fn eval_hand_case() -> Result<CheckOutcome> {
    let g = [[0.0, 0.0, 10.0, 10.0], [20.0, 0.0, 30.0, 10.0], [40.0, 0.0, 50.0, 10.0]];
    let gts = vec![g.iter().map(|&b| GtObject::rectangle(0, b)).collect::<Vec<_>>()];
    let det = |score, bbox| Detection { class: 0, score, bbox };
    let dets = vec![vec![det(0.9, g[0]), det(0.8, g[0]), det(0.7, g[1])]];
    let report = evaluate(&dets, &gts, 1)?;
    let expected = (34.0 + 33.0 * (2.0 / 3.0)) / 101.0;
    let worst = report.ap.iter().map(|a| (a - expected).abs()).fold(0.0, f64::max);
    Ok(CheckOutcome::new(
        "eval_hand_case",
        worst < 1e-12,
        format!("AP {:.6} expected {expected:.6}", report.ap[0]),
    ))
}

/// With both border heads zeroed, refined detections must be the coarse
/// detections with every score halved.
pub fn zero_delta_reduction(model: &BorderDet<f32>, images: &Tensor4<f32>, cfg: &InferConfig) -> Result<CheckOutcome> {
    let mut model = model.clone();
    model.zero_border_heads();
    let (out, _) = model.forward(images)?;
    let coarse = postprocess(&out, cfg, Stage::Coarse);
    let refined = postprocess(&out, cfg, Stage::Refined);
    let mut total = 0;
    let mut ok = true;
    for (c, r) in coarse.iter().zip(&refined) {
        total += c.len();
        ok &= c.len() == r.len()
            && c.iter().zip(r).all(|(a, b)| {
                a.class == b.class
                    && a.bbox.map(f64::to_bits) == b.bbox.map(f64::to_bits)
                    && ((a.score as f32) * 0.5f32).to_bits() == (b.score as f32).to_bits()
            });
    }
    Ok(CheckOutcome::new(
        "zero_delta_reduction",
        ok && total > 0,
        format!("{total} coarse detections compared against refined"),
    ))
}

// ---- gradients -------------------------------------------------------------

fn cfg() -> GradCheckConfig {
    GradCheckConfig::with_tolerance(GRAD_TOLERANCE)
}

fn param_values<M: HasParams<f64>>(m: &M) -> Vec<f64> {
    let mut v = Vec::new();
    m.visit_params("", &mut |_, _, d| v.extend_from_slice(d));
    v
}

fn param_grads<M: HasParams<f64>>(m: &mut M) -> Vec<f64> {
    let mut v = Vec::new();
    m.visit_params_mut("", &mut |s| v.extend_from_slice(s.grad));
    v
}

fn set_param_values<M: HasParams<f64>>(m: &mut M, values: &[f64]) {
    let mut off = 0;
    m.visit_params_mut("", &mut |s| {
        let n = s.value.len();
        s.value.copy_from_slice(&values[off..off + n]);
        off += n;
    });
    m.bump_version();
}

fn randomize_params<M: HasParams<f64>>(m: &mut M, scale: f64, rng: &mut ChaCha8Rng) {
    m.visit_params_mut("", &mut |s| s.value.iter_mut().for_each(|v| *v += rng.gen_range(-scale..scale)));
    m.bump_version();
}

/// Up to `per_tensor` indices from every parameter tensor.
fn param_indices<M: HasParams<f64>>(m: &M, per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::new();
    let mut off = 0;
    m.visit_params("", &mut |_, _, d| {
        out.extend(sample_indices(d.len(), per_tensor, rng).into_iter().map(|i| off + i));
        off += d.len();
    });
    out
}

/// Checks parameter gradients of `model` for the scalar objective `f`.
fn check_params<M: HasParams<f64> + Clone>(
    name: &str,
    model: &M,
    analytic: &[f64],
    indices: Option<&[usize]>,
    f: impl Fn(&M) -> f64,
) -> GradCheckReport {
    let mut probe = model.clone();
    check_gradient(
        name,
        |v| {
            set_param_values(&mut probe, v);
            f(&probe)
        },
        &param_values(model),
        analytic,
        indices,
        cfg(),
    )
}

fn conv_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for (label, in_shape, out_ch, spec) in [
        ("conv3x3", [1, 2, 5, 5], 3, ConvSpec::SAME3),
        ("conv3x3_stride2", [2, 2, 6, 5], 2, ConvSpec::DOWN3),
        ("conv1x1", [2, 3, 4, 4], 2, ConvSpec::POINTWISE),
    ] {
        let x = random_tensor(in_shape, -1.0, 1.0, rng);
        let mut p = LayerParams::<f64>::uniform(out_ch, in_shape[1], spec.kernel, 0.5, 0.0, rng);
        p.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        let y = conv2d_forward(&x, &p, spec)?;
        let g = random_tensor(y.shape(), -1.0, 1.0, rng);
        let gx = conv2d_backward(&x, &g, &mut p, spec)?;
        let objective = |x: &Tensor4<f64>, p: &LayerParams<f64>| conv2d_forward(x, p, spec).unwrap().dot(&g).unwrap();
        let shape = x.shape();
        reports.push(check_gradient(
            &format!("{label}.input"),
            |v| objective(&Tensor4::from_vec(shape, v.to_vec()).unwrap(), &p),
            x.data(),
            gx.data(),
            None,
            cfg(),
        ));
        let grads = param_grads(&mut p);
        reports.push(check_params(&format!("{label}.params"), &p, &grads, None, |p| objective(&x, p)));
    }
    Ok(reports)
}

fn norm_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let x = random_tensor([2, 3, 4, 5], -2.0, 2.0, rng);
    let mut a = AffineParams::<f64>::identity(3);
    randomize_params(&mut a, 0.5, rng);
    let eps = INSTANCE_NORM_EPS;
    let (y, cache) = instance_norm_forward(&x, Some(&a), eps)?;
    let g = random_tensor(y.shape(), -1.0, 1.0, rng);
    let gx = instance_norm_backward(&g, &cache, Some(&mut a))?;
    let objective =
        |x: &Tensor4<f64>, a: &AffineParams<f64>| instance_norm_forward(x, Some(a), eps).unwrap().0.dot(&g).unwrap();
    let shape = x.shape();
    let input = check_gradient(
        "instance_norm.input",
        |v| objective(&Tensor4::from_vec(shape, v.to_vec()).unwrap(), &a),
        x.data(),
        gx.data(),
        None,
        cfg(),
    );
    let grads = param_grads(&mut a);
    let params = check_params("instance_norm.affine", &a, &grads, None, |a| objective(&x, a));
    Ok(vec![input, params])
}

fn relu_check(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = Tensor4::from_fn([1, 2, 4, 4], |_| {
        let m = rng.gen_range(0.1..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let g = random_tensor(x.shape(), -1.0, 1.0, rng);
    let gx = relu_backward(&x, &g)?;
    let shape = x.shape();
    Ok(check_gradient(
        "relu",
        |v| relu(&Tensor4::from_vec(shape, v.to_vec()).unwrap()).dot(&g).unwrap(),
        x.data(),
        gx.data(),
        None,
        GradCheckConfig::with_tolerance(1e-8),
    ))
}

fn border_align_check(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (b, c, h, w) = (2, 2, 5, 6);
    let x = random_tensor([b, BLOCKS * c, h, w], -2.0, 2.0, rng);
    let boxes = random_boxes(b, h, w, rng);
    let pool = PoolConfig::default();
    let (y, rec) = border_align_forward(&x, &boxes, pool)?;
    let g = random_tensor(y.shape(), -1.0, 1.0, rng);
    let gx = border_align_backward(&g, &rec, &boxes, x.shape())?;
    let shape = x.shape();
    Ok(check_gradient(
        "border_align.input",
        |v| border_align_forward(&Tensor4::from_vec(shape, v.to_vec()).unwrap(), &boxes, pool).unwrap().0.dot(&g).unwrap(),
        x.data(),
        gx.data(),
        None,
        cfg(),
    ))
}

fn bam_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let feat = random_tensor([2, 2, 6, 6], -1.0, 1.0, rng);
    let boxes = random_boxes(2, 6, 6, rng);
    let mut p = BamParams::<f64>::new(2, rng);
    randomize_params(&mut p, 0.3, rng);
    let pool = PoolConfig::default();
    let (y, cache) = bam_forward(&feat, &boxes, &p, pool)?;
    let g = random_tensor(y.shape(), -1.0, 1.0, rng);
    let gx = bam_backward(&g, &cache, &mut p)?;
    let objective = |f: &Tensor4<f64>, p: &BamParams<f64>| bam_forward(f, &boxes, p, pool).unwrap().0.dot(&g).unwrap();
    let shape = feat.shape();
    let input = check_gradient(
        "bam.input",
        |v| objective(&Tensor4::from_vec(shape, v.to_vec()).unwrap(), &p),
        feat.data(),
        gx.data(),
        None,
        cfg(),
    );
    let grads = param_grads(&mut p);
    let params = check_params("bam.params", &p, &grads, None, |p| objective(&feat, p));
    Ok(vec![input, params])
}

fn loss_checks(rng: &mut ChaCha8Rng) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    let logits = random_tensor([2, 3, 3, 3], -3.0, 3.0, rng);
    let labels: Vec<usize> = (0..18).map(|_| rng.gen_range(0..4)).collect();
    let focal = FocalParams::default();
    let (_, g) = focal_loss(&logits, &labels, focal);
    let shape = logits.shape();
    reports.push(check_gradient(
        "focal_loss",
        |v| focal_loss(&Tensor4::from_vec(shape, v.to_vec()).unwrap(), &labels, focal).0,
        logits.data(),
        g.data(),
        None,
        cfg(),
    ));

    let mut iou = GradCheckReport::empty("iou_loss", GRAD_TOLERANCE);
    for _ in 0..20 {
        let gt = [10.0, 12.0, 30.0, 28.0];
        let pred: [f64; 4] = [
            rng.gen_range(2.0..18.0),
            rng.gen_range(4.0..20.0),
            rng.gen_range(22.0..40.0),
            rng.gen_range(20.0..36.0),
        ];
        let (_, g) = iou_loss(pred, gt);
        iou.merge(&check_gradient("iou_loss", |v| iou_loss([v[0], v[1], v[2], v[3]], gt).0, &pred, &g, None, cfg()));
    }
    reports.push(iou);

    let pred: Vec<[f64; 4]> = (0..5).map(|_| [0; 4].map(|_| rng.gen_range(-1.0..1.0))).collect();
    let target: Vec<[f64; 4]> = pred
        .iter()
        .map(|p| p.map(|v| v + if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.01..0.5)))
        .collect();
    let (_, g) = l1_border_loss(&pred, &target);
    let flat: Vec<f64> = pred.iter().flatten().copied().collect();
    let flat_g: Vec<f64> = g.iter().flatten().copied().collect();
    reports.push(check_gradient(
        "l1_border_loss",
        |v| {
            let p: Vec<[f64; 4]> = v.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
            l1_border_loss(&p, &target).0
        },
        &flat,
        &flat_g,
        None,
        cfg(),
    ));
    reports
}

/// Small model, image and objects for the end-to-end checks, plus frozen
/// boxes that put several locations over the border-stage IoU threshold.
fn head_fixture(rng: &mut ChaCha8Rng) -> Result<(BorderDet<f64>, Tensor4<f64>, Tensor4<f64>, Vec<Vec<GtObject>>)> {
    let cfg = ModelConfig {
        backbone_channels: vec![3, 4, 4],
        cls_channels: 4,
        reg_channels: 2,
        pool_size: 10,
        init_seed: rng.gen(),
        ..ModelConfig::default()
    };
    let mut model = BorderDet::<f64>::new(cfg)?;
    randomize_params(&mut model, 0.05, rng);
    let image = random_tensor([2, 1, 32, 32], 0.0, 1.0, rng);
    let gts = vec![
        vec![GtObject::rectangle(0, [3.0, 2.0, 19.0, 21.0]), GtObject::ellipse(1, [24.0, 22.0], [6.0, 8.0])],
        vec![GtObject::ellipse(1, [14.0, 15.0], [11.0, 9.0])],
    ];
    let stride = model.config().stride();
    let (gh, gw) = (32 / stride, 32 / stride);
    let mut boxes = Tensor4::zeros([2, 4, gh, gw]);
    for (b, objs) in gts.iter().enumerate() {
        for y in 0..gh {
            for x in 0..gw {
                let (cx, cy) = crate::detector::cell_center::<f64>(y, x, stride);
                let inside = objs.iter().find(|o| cx > o.bbox[0] && cx < o.bbox[2] && cy > o.bbox[1] && cy < o.bbox[3]);
                let bx = match inside {
                    Some(o) => o.bbox.map(|v| v + rng.gen_range(-1.5..1.5)),
                    None => {
                        let s = rng.gen_range(3.0..8.0);
                        [cx - s, cy - s, cx + s, cy + s]
                    }
                };
                let bx = [bx[0].min(bx[2]), bx[1].min(bx[3]), bx[0].max(bx[2]), bx[1].max(bx[3])];
                for (c, v) in bx.into_iter().enumerate() {
                    boxes.set(b, c, y, x, v);
                }
            }
        }
    }
    Ok((model, image, boxes, gts))
}

fn head_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let (mut model, image, boxes, gts) = head_fixture(rng)?;
    let focal = FocalParams::default();
    let (out, cache) = model.forward_with_boxes(&image, Some(&boxes))?;
    let coarse = assign_coarse_targets::<f64>(out.grid(), out.stride, &gts);
    let border = assign_border_targets::<f64>(&boxes, &gts, 0.6, model.config().sigma);
    assert!(coarse.num_positive() > 0 && border.num_positive() > 0, "fixture must have positives");
    let (_, grads) = total_loss(&out, &coarse, &border, focal);

    // loss w.r.t. each head output
    let mut total = GradCheckReport::empty("total_loss.outputs", GRAD_TOLERANCE);
    for which in 0..4 {
        let (point, analytic) = match which {
            0 => (&out.coarse_cls_logits, &grads.coarse_cls_logits),
            1 => (&out.coarse_reg, &grads.coarse_reg),
            2 => (&out.border_cls_logits, &grads.border_cls_logits),
            _ => (&out.border_offsets, &grads.border_offsets),
        };
        let shape = point.shape();
        let r = check_gradient(
            "total_loss.outputs",
            |v| {
                let mut o = out.clone();
                let t = Tensor4::from_vec(shape, v.to_vec()).unwrap();
                match which {
                    0 => o.coarse_cls_logits = t,
                    1 => o.coarse_reg = t,
                    2 => o.border_cls_logits = t,
                    _ => o.border_offsets = t,
                }
                total_loss(&o, &coarse, &border, focal).0.total
            },
            point.data(),
            analytic.data(),
            None,
            cfg(),
        );
        total.merge(&r);
    }

    model.zero_grad();
    model.backward(&grads, &cache)?;
    let analytic = param_grads(&mut model);
    let indices = param_indices(&model, 24, rng);
    let params = check_params("full_head.params", &model, &analytic, Some(&indices), |m| {
        let (o, _) = m.forward_with_boxes(&image, Some(&boxes)).unwrap();
        total_loss(&o, &coarse, &border, focal).0.total
    });
    Ok(vec![total, params])
}

/// Every backward pass against central differences, in f64.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = conv_checks(&mut rng)?;
    reports.extend(norm_checks(&mut rng)?);
    reports.push(relu_check(&mut rng)?);
    reports.push(border_align_check(&mut rng)?);
    reports.extend(bam_checks(&mut rng)?);
    reports.extend(loss_checks(&mut rng));
    reports.extend(head_checks(&mut rng)?);
    Ok(reports)
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
    pub gradients: Vec<GradCheckReport>,
    pub passed: bool,
}

/// The full suite used by the `verify` command.
pub fn run_all(seed: u64) -> Result<VerifyReport> {
    let mut checks = oracle_equivalence(1000, seed)?.to_vec();
    checks.push(round_trip(10_000, seed));
    checks.push(nms_against_oracle(1000, seed));
    checks.push(eval_hand_case()?);
    let model = BorderDet::<f32>::new(ModelConfig { init_seed: seed, ..ModelConfig::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor4::from_fn([2, 1, 64, 64], |_| rng.gen_range(0.0f32..1.0));
    let infer = InferConfig { score_thresh: 0.0, ..InferConfig::default() };
    checks.push(zero_delta_reduction(&model, &images, &infer)?);
    let gradients = gradient_suite(seed)?;
    let passed = checks.iter().all(|c| c.passed) && gradients.iter().all(|g| g.passed);
    Ok(VerifyReport { checks, gradients, passed })
}
