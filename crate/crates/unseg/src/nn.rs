//! Differentiable layers: convolution, norms, and their parameter handling.
//!
//! Layers own their parameters as plain tensors and register them on the
//! tape by name at each forward call, so one gradient accumulates per
//! parameter regardless of fan-out. Names double as the checkpoint tensor
//! table keys.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::elem::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Structural description of a 2-D convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// 1 = dense; `groups == in_channels` = depthwise.
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn dense(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            has_bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.has_bias = b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel < 1 || self.stride < 1 {
            return Err(Error::InvalidConfig(format!(
                "conv kernel and stride must be >= 1, got k={} s={}",
                self.kernel, self.stride
            )));
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::InvalidConfig(format!(
                "conv channels ({} -> {}) must be divisible by groups ({})",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = (h + 2 * self.padding).checked_sub(self.kernel);
        let ow = (w + 2 * self.padding).checked_sub(self.kernel);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh / self.stride + 1, ow / self.stride + 1)),
            _ => Err(Error::BadSpatialDims {
                h,
                w,
                reason: format!("kernel {} exceeds padded input", self.kernel),
            }),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    /// Learnable parameter count (weight + optional bias).
    pub fn param_count(&self) -> usize {
        let w: usize = self.weight_shape().iter().product();
        w + if self.has_bias { self.out_channels } else { 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    BatchNorm,
    LayerNormChannels,
}

/// Declarative description of a normalization layer.
#[derive(Clone, Debug)]
pub struct NormSpec {
    pub kind: NormKind,
    pub num_features: usize,
    pub eps: f64,
    /// Running-stat momentum; batch norm only.
    pub momentum: f64,
}

impl NormSpec {
    pub fn batch(num_features: usize) -> Self {
        Self {
            kind: NormKind::BatchNorm,
            num_features,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn layer_channels(num_features: usize) -> Self {
        Self {
            kind: NormKind::LayerNormChannels,
            num_features,
            eps: 1e-6,
            momentum: 0.0,
        }
    }
}

/// Whether a tensor is trained by the optimizer or carried as state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Param,
    Buffer,
}

/// Visitor over a module tree's named tensors, in a fixed construction order.
pub type TensorVisitor<'a, E> = dyn FnMut(&str, TensorRole, &mut Tensor<E>) + 'a;

/// Kaiming-uniform fan-in init used for all conv weights.
pub fn kaiming_uniform<E: Element>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor<E> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

fn bias_uniform<E: Element>(len: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(&[len], -bound, bound, rng)
}

pub struct Conv2d<E: Element> {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
}

impl<E: Element> Conv2d<E> {
    pub fn new(name: impl Into<String>, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let fan_in = (spec.in_channels / spec.groups) * spec.kernel * spec.kernel;
        let weight = kaiming_uniform(&spec.weight_shape(), fan_in, rng);
        let bias = spec
            .has_bias
            .then(|| bias_uniform(spec.out_channels, fan_in, rng));
        Self {
            name: name.into(),
            spec,
            weight,
            bias,
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.weight", self.name), self.weight.clone());
        let b = self
            .bias
            .as_ref()
            .map(|b| tape.param(&format!("{}.bias", self.name), b.clone()));
        tape.conv2d(x, w, b, &self.spec)
    }

    pub fn visit(&mut self, f: &mut TensorVisitor<E>) {
        f(
            &format!("{}.weight", self.name),
            TensorRole::Param,
            &mut self.weight,
        );
        if let Some(b) = self.bias.as_mut() {
            f(&format!("{}.bias", self.name), TensorRole::Param, b);
        }
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }
}

pub struct BatchNorm2d<E: Element> {
    pub name: String,
    pub num_features: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub training: bool,
}

impl<E: Element> BatchNorm2d<E> {
    pub fn new(name: impl Into<String>, num_features: usize) -> Self {
        Self {
            name: name.into(),
            num_features,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Tensor::ones(&[num_features]),
            beta: Tensor::zeros(&[num_features]),
            running_mean: Tensor::zeros(&[num_features]),
            running_var: Tensor::ones(&[num_features]),
            training: true,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        if self.training {
            let gamma = tape.param(&format!("{}.gamma", self.name), self.gamma.clone());
            let beta = tape.param(&format!("{}.beta", self.name), self.beta.clone());
            let (n, _, h, w) = tape.value(x).dims4()?;
            let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, self.eps)?;
            // Running stats track the unbiased batch variance.
            let m = (n * h * w) as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mom = E::from_f64(self.momentum);
            let one_m = E::from_f64(1.0 - self.momentum);
            let rm = self.running_mean.data_mut();
            for (r, &b) in rm.iter_mut().zip(mean.iter()) {
                *r = one_m * *r + mom * b;
            }
            let rv = self.running_var.data_mut();
            for (r, &b) in rv.iter_mut().zip(var.iter()) {
                *r = one_m * *r + mom * b * E::from_f64(unbias);
            }
            Ok(y)
        } else {
            // Eval mode is a fixed affine map from the running statistics.
            let scale: Vec<E> = self
                .gamma
                .data()
                .iter()
                .zip(self.running_var.data().iter())
                .map(|(&g, &v)| E::from_f64(g.to_f64() / (v.to_f64() + self.eps).sqrt()))
                .collect();
            let shift: Vec<E> = self
                .beta
                .data()
                .iter()
                .zip(self.running_mean.data().iter().zip(scale.iter()))
                .map(|(&b, (&m, &s))| b - m * s)
                .collect();
            let s = tape.constant(Tensor::new(vec![self.num_features], scale)?);
            let t = tape.constant(Tensor::new(vec![self.num_features], shift)?);
            let y = tape.mul(x, s)?;
            tape.add(y, t)
        }
    }

    pub fn visit(&mut self, f: &mut TensorVisitor<E>) {
        f(
            &format!("{}.gamma", self.name),
            TensorRole::Param,
            &mut self.gamma,
        );
        f(
            &format!("{}.beta", self.name),
            TensorRole::Param,
            &mut self.beta,
        );
        f(
            &format!("{}.running_mean", self.name),
            TensorRole::Buffer,
            &mut self.running_mean,
        );
        f(
            &format!("{}.running_var", self.name),
            TensorRole::Buffer,
            &mut self.running_var,
        );
    }

    pub fn param_count(&self) -> usize {
        2 * self.num_features
    }
}

pub struct LayerNormCh<E: Element> {
    pub name: String,
    pub num_features: usize,
    pub eps: f64,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Element> LayerNormCh<E> {
    pub fn new(name: impl Into<String>, num_features: usize) -> Self {
        Self {
            name: name.into(),
            num_features,
            eps: 1e-6,
            gamma: Tensor::ones(&[num_features]),
            beta: Tensor::zeros(&[num_features]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let gamma = tape.param(&format!("{}.gamma", self.name), self.gamma.clone());
        let beta = tape.param(&format!("{}.beta", self.name), self.beta.clone());
        tape.layernorm_channels(x, gamma, beta, self.eps)
    }

    pub fn visit(&mut self, f: &mut TensorVisitor<E>) {
        f(
            &format!("{}.gamma", self.name),
            TensorRole::Param,
            &mut self.gamma,
        );
        f(
            &format!("{}.beta", self.name),
            TensorRole::Param,
            &mut self.beta,
        );
    }

    pub fn param_count(&self) -> usize {
        2 * self.num_features
    }
}

/// Global response normalization. Gamma and beta start at zero, which makes
/// the layer an exact identity at init thanks to its residual form.
pub struct Grn<E: Element> {
    pub name: String,
    pub num_features: usize,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Element> Grn<E> {
    pub fn new(name: impl Into<String>, num_features: usize) -> Self {
        Self {
            name: name.into(),
            num_features,
            gamma: Tensor::zeros(&[num_features]),
            beta: Tensor::zeros(&[num_features]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let gamma = tape.param(&format!("{}.gamma", self.name), self.gamma.clone());
        let beta = tape.param(&format!("{}.beta", self.name), self.beta.clone());
        tape.grn(x, gamma, beta)
    }

    pub fn visit(&mut self, f: &mut TensorVisitor<E>) {
        f(
            &format!("{}.gamma", self.name),
            TensorRole::Param,
            &mut self.gamma,
        );
        f(
            &format!("{}.beta", self.name),
            TensorRole::Param,
            &mut self.beta,
        );
    }

    pub fn param_count(&self) -> usize {
        2 * self.num_features
    }
}

/// Norm layer built from a [`NormSpec`].
pub enum Norm<E: Element> {
    Batch(BatchNorm2d<E>),
    LayerCh(LayerNormCh<E>),
}

impl<E: Element> Norm<E> {
    pub fn new(name: impl Into<String>, spec: &NormSpec) -> Self {
        let name = name.into();
        match spec.kind {
            NormKind::BatchNorm => {
                let mut n = BatchNorm2d::new(name, spec.num_features);
                n.eps = spec.eps;
                n.momentum = spec.momentum;
                Norm::Batch(n)
            }
            NormKind::LayerNormChannels => {
                let mut n = LayerNormCh::new(name, spec.num_features);
                n.eps = spec.eps;
                Norm::LayerCh(n)
            }
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        match self {
            Norm::Batch(n) => n.forward(tape, x),
            Norm::LayerCh(n) => n.forward(tape, x),
        }
    }

    pub fn visit(&mut self, f: &mut TensorVisitor<E>) {
        match self {
            Norm::Batch(n) => n.visit(f),
            Norm::LayerCh(n) => n.visit(f),
        }
    }

    pub fn set_training(&mut self, on: bool) {
        if let Norm::Batch(n) = self {
            n.training = on;
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Norm::Batch(n) => n.param_count(),
            Norm::LayerCh(n) => n.param_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::Tape;
    use crate::kernels::conv::conv2d_forward;

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let spec = ConvSpec::dense(1, 1, 3).padding(0).bias(false);
        let y = tape.conv2d(x, w, None, &spec).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 * 0.5 - 3.0));
        let w = tape.leaf(Tensor::ones(&[1, 1, 1, 1]));
        let spec = ConvSpec::dense(1, 1, 1).padding(0).bias(false);
        let y = tape.conv2d(x, w, None, &spec).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 3, 4, 4]));
        let w = tape.leaf(Tensor::ones(&[2, 2, 3, 3]));
        let spec = ConvSpec::dense(2, 2, 3);
        assert!(tape.conv2d(x, w, None, &spec).is_err());
    }

    #[test]
    fn depthwise_equals_per_channel_convolutions() {
        // Oracle: groups == C must agree exactly with C independent
        // single-channel convolutions.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 3;
        let x = Tensor::<f64>::rand_uniform(&[2, c, 6, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(&[c, 1, 3, 3], -1.0, 1.0, &mut rng);
        let spec = ConvSpec::dense(c, c, 3).groups(c).bias(false);
        let fused = conv2d_forward(&x, &w, None, &spec).unwrap();

        let single = ConvSpec::dense(1, 1, 3).bias(false);
        for ci in 0..c {
            let xc = Tensor::from_fn(&[2, 1, 6, 6], |i| {
                let (hw, n) = (36, i / 36);
                x.data()[(n * c + ci) * hw + i % 36]
            });
            let wc = Tensor::from_fn(&[1, 1, 3, 3], |i| w.data()[ci * 9 + i]);
            let yc = conv2d_forward(&xc, &wc, None, &single).unwrap();
            for n in 0..2 {
                for i in 0..36 {
                    assert_eq!(
                        yc.data()[n * 36 + i],
                        fused.data()[(n * c + ci) * 36 + i],
                        "mismatch at n={n} c={ci} i={i}"
                    );
                }
            }
        }
    }

    #[test]
    fn batchnorm_normalizes_to_unit_stats() {
        // Channel with mean 5 and variance 4 maps to (x - 5) / 2 when
        // gamma = 1, beta = 0 and eps is negligible.
        let vals = [3.0, 7.0, 3.0, 7.0, 3.0, 7.0, 3.0, 7.0];
        let x = Tensor::<f64>::new(vec![1, 1, 2, 4], vals.to_vec()).unwrap();
        let mut bn = BatchNorm2d::new("bn", 1);
        bn.eps = 1e-12;
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = bn.forward(&mut tape, xv).unwrap();
        for (&out, &v) in tape.value(y).data().iter().zip(vals.iter()) {
            assert!((out - (v - 5.0) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_eval_is_affine_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        // Push a train step through so the running stats move.
        let x = Tensor::rand_uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        bn.forward(&mut tape, xv).unwrap();

        bn.training = false;
        let x1 = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let run = |bn: &mut BatchNorm2d<f64>, x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = bn.forward(&mut tape, xv).unwrap();
            tape.value(y).clone()
        };
        let y1 = run(&mut bn, &x1);
        let y2 = run(&mut bn, &x1);
        assert_eq!(y1.data(), y2.data());

        // Affine: f(2x) - f(x) == f(3x) - f(2x) elementwise.
        let x2 = x1.map(|v| v * 2.0);
        let x3 = x1.map(|v| v * 3.0);
        let (y2x, y3x) = (run(&mut bn, &x2), run(&mut bn, &x3));
        for i in 0..y1.numel() {
            let d1 = y2x.data()[i] - y1.data()[i];
            let d2 = y3x.data()[i] - y2x.data()[i];
            assert!((d1 - d2).abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_of_constant_channels_is_beta() {
        let x = Tensor::<f64>::full(&[1, 4, 2, 2], 3.25);
        let ln = LayerNormCh::new("ln", 4);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = ln.forward(&mut tape, xv).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn grn_with_zero_affine_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let grn = Grn::new("grn", 3);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = grn.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn grn_with_identical_channels_scales_uniformly() {
        // All channels identical => N_c = mean-normalized response ~= 1,
        // so out = gamma * x + x with beta = 0.
        let base = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
        let x = Tensor::from_fn(&[1, 3, 3, 3], |i| base.data()[i % 9]);
        let mut grn = Grn::new("grn", 3);
        grn.gamma = Tensor::full(&[3], 0.5);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = grn.forward(&mut tape, xv).unwrap();
        for (out, xin) in tape.value(y).data().iter().zip(x.data()) {
            // N_c = g / (mean g + eps) with eps tiny: allow 1e-6 slack.
            assert!((out - 1.5 * xin).abs() < 1e-5);
        }
    }

    #[test]
    fn norm_spec_builds_both_kinds() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64);
        for spec in [NormSpec::batch(2), NormSpec::layer_channels(2)] {
            let mut norm = Norm::new("n", &spec);
            norm.set_training(true);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = norm.forward(&mut tape, xv).unwrap();
            assert_eq!(tape.value(y).shape(), x.shape());
            assert_eq!(norm.param_count(), 4);
        }
    }

    #[test]
    fn conv_init_is_seed_deterministic() {
        let spec = ConvSpec::dense(3, 8, 3);
        let a = Conv2d::<f32>::new("c", spec.clone(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = Conv2d::<f32>::new("c", spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.weight.data(), b.weight.data());
        assert_eq!(a.bias.unwrap().data(), b.bias.unwrap().data());
    }
}
