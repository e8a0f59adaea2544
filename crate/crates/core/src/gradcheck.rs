//! Central finite-difference verification of analytic gradients (f64 only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Relative errors are `|a - n| / max(|a|, |n|, floor)`; the floor keeps
    /// vanishing gradients in an absolute-error regime.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-6, floor: 1e-3 }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self { tolerance, ..Self::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: Option<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn empty(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: None,
            tolerance,
            passed: true,
        }
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst_index.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst_index = Some(index);
        }
        self.passed = self.max_rel_err < self.tolerance;
    }

    /// Folds another report into this one (worst case wins).
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst_index = other.worst_index;
        }
        self.passed = self.passed && other.passed && self.max_rel_err < self.tolerance;
    }
}

/// Compares `analytic[i]` to the central difference of `objective` at
/// `point` for every `i` in `indices` (all coordinates when `None`).
pub fn check_gradient(
    name: &str,
    mut objective: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    indices: Option<&[usize]>,
    cfg: GradCheckConfig,
) -> GradCheckReport {
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut report = GradCheckReport::empty(name, cfg.tolerance);
    let mut x = point.to_vec();
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    for &i in indices {
        let orig = x[i];
        x[i] = orig + cfg.step;
        let plus = objective(&x);
        x[i] = orig - cfg.step;
        let minus = objective(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        report.record(i, analytic[i], numeric, cfg.floor);
    }
    report
}

/// A tensor-to-tensor map with an explicit vector-Jacobian product.
pub trait DifferentiableOp {
    fn name(&self) -> &str;
    fn forward(&self, input: &Tensor4<f64>) -> Result<Tensor4<f64>>;
    fn backward(&self, input: &Tensor4<f64>, grad_out: &Tensor4<f64>) -> Result<Tensor4<f64>>;
}

/// Checks `op.backward` against finite differences of the scalar
/// `Σ g ⊙ op(x)` for a seeded random upstream gradient `g`.
pub fn grad_check(
    op: &dyn DifferentiableOp,
    input: &Tensor4<f64>,
    cfg: GradCheckConfig,
    seed: u64,
) -> Result<GradCheckReport> {
    let out = op.forward(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upstream = Tensor4::from_fn(out.shape(), |_| rng.gen_range(-1.0..1.0));
    let analytic = op.backward(input, &upstream)?;
    let shape = input.shape();
    let report = check_gradient(
        op.name(),
        |x| {
            let t = Tensor4::from_vec(shape, x.to_vec()).expect("shape preserved");
            op.forward(&t).expect("forward succeeded at base point").dot(&upstream).unwrap()
        },
        input.data(),
        analytic.data(),
        None,
        cfg,
    );
    Ok(report)
}

/// Picks up to `max` distinct indices in `0..len`, deterministically.
pub fn sample_indices(len: usize, max: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, max).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let x = [0.3, -1.2, 2.0];
        let f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let good: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        let r = check_gradient("sq", f, &x, &good, None, GradCheckConfig::default());
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 3);
        let mut bad = good.clone();
        bad[2] += 0.01;
        let r = check_gradient("sq", f, &x, &bad, None, GradCheckConfig::default());
        assert!(!r.passed);
        assert_eq!(r.worst_index, Some(2));
    }
}
