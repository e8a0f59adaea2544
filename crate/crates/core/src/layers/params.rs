use rand::Rng;

use crate::tensor::{Real, Tensor4};

/// Mutable view of one parameter tensor and its gradient buffer.
pub struct ParamSlot<'a, T> {
    pub name: String,
    pub shape: [usize; 4],
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
}

/// Anything that owns named learnable tensors.
pub trait HasParams<T: Real> {
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>));

    /// Read-only walk: `(name, shape, values)`.
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[T]));

    /// Marks parameters as modified so caches built before the change are
    /// rejected by backward passes.
    fn bump_version(&mut self);

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |slot| slot.grad.iter_mut().for_each(|g| *g = T::zero()));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, _, v| n += v.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Convolution weights `(out, in, k, k)` and per-output-channel bias.
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
    pub grad_weight: Tensor4<T>,
    pub grad_bias: Vec<T>,
    version: u64,
}

impl<T: Real> LayerParams<T> {
    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize) -> Self {
        let shape = [out_ch, in_ch, kernel, kernel];
        Self {
            weight: Tensor4::zeros(shape),
            bias: vec![T::zero(); out_ch],
            grad_weight: Tensor4::zeros(shape),
            grad_bias: vec![T::zero(); out_ch],
            version: 0,
        }
    }

    /// Weights drawn from `U(-bound, bound)`, bias set to `bias`.
    pub fn uniform(
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        bound: f64,
        bias: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut p = Self::zeros(out_ch, in_ch, kernel);
        for w in p.weight.data_mut() {
            *w = T::lit(rng.gen_range(-bound..=bound));
        }
        p.bias.iter_mut().for_each(|b| *b = T::lit(bias));
        p
    }

    /// He-uniform init for layers followed by a ReLU.
    pub fn kaiming(out_ch: usize, in_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Self::uniform(out_ch, in_ch, kernel, (6.0 / fan_in).sqrt(), 0.0, rng)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in(out_ch: usize, in_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Self::uniform(out_ch, in_ch, kernel, 1.0 / fan_in.sqrt(), 0.0, rng)
    }

    /// Identity 1×1 map (requires `out_ch == in_ch`).
    pub fn identity(channels: usize) -> Self {
        let mut p = Self::zeros(channels, channels, 1);
        for c in 0..channels {
            p.weight.set(c, c, 0, 0, T::one());
        }
        p
    }

    pub fn out_channels(&self) -> usize {
        self.weight.batch()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.channels()
    }

    pub fn kernel(&self) -> usize {
        self.weight.height()
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

impl<T: Real> HasParams<T> for LayerParams<T> {
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        f(ParamSlot {
            name: join(prefix, "weight"),
            shape: self.weight.shape(),
            value: self.weight.data_mut(),
            grad: self.grad_weight.data_mut(),
        });
        f(ParamSlot {
            name: join(prefix, "bias"),
            shape: [1, self.bias.len(), 1, 1],
            value: &mut self.bias,
            grad: &mut self.grad_bias,
        });
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[T])) {
        f(&join(prefix, "weight"), self.weight.shape(), self.weight.data());
        f(&join(prefix, "bias"), [1, self.bias.len(), 1, 1], &self.bias);
    }

    fn bump_version(&mut self) {
        self.version += 1;
    }
}

/// Per-channel scale and shift applied after normalization.
#[derive(Debug, Clone)]
pub struct AffineParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    version: u64,
}

impl<T: Real> AffineParams<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            version: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

impl<T: Real> HasParams<T> for AffineParams<T> {
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, T>)) {
        let shape = [1, self.gamma.len(), 1, 1];
        f(ParamSlot {
            name: join(prefix, "gamma"),
            shape,
            value: &mut self.gamma,
            grad: &mut self.grad_gamma,
        });
        f(ParamSlot {
            name: join(prefix, "beta"),
            shape,
            value: &mut self.beta,
            grad: &mut self.grad_beta,
        });
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[T])) {
        let shape = [1, self.gamma.len(), 1, 1];
        f(&join(prefix, "gamma"), shape, &self.gamma);
        f(&join(prefix, "beta"), shape, &self.beta);
    }

    fn bump_version(&mut self) {
        self.version += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_buffers_match_parameter_shapes() {
        let mut rng = rand::thread_rng();
        let mut p = LayerParams::<f32>::kaiming(4, 3, 3, &mut rng);
        assert_eq!(p.grad_weight.shape(), p.weight.shape());
        assert_eq!(p.grad_bias.len(), p.bias.len());
        let mut names = Vec::new();
        p.visit_params_mut("conv", &mut |s| {
            assert_eq!(s.value.len(), s.grad.len());
            names.push(s.name);
        });
        assert_eq!(names, ["conv.weight", "conv.bias"]);
        assert_eq!(p.param_count(), 4 * 3 * 9 + 4);
    }

    #[test]
    fn zero_grad_clears_buffers_without_bumping() {
        let mut p = LayerParams::<f64>::zeros(2, 2, 1);
        p.grad_bias[1] = 3.0;
        p.grad_weight.data_mut()[0] = 1.0;
        p.zero_grad();
        assert_eq!(p.grad_bias, vec![0.0, 0.0]);
        assert_eq!(p.grad_weight.max_abs(), 0.0);
        assert_eq!(p.version(), 0);
        p.bump_version();
        assert_eq!(p.version(), 1);
    }
}
