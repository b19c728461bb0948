//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Tape`] is built per training step: parameters and inputs enter as
//! leaves, every op appends a node holding its output value, the op kind,
//! and whatever the backward pass needs. Node inputs always reference
//! earlier nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep with `+=` accumulation into
//! each parent (the multivariate chain rule for fan-out).

use std::collections::HashMap;

use crate::elem::Element;
use crate::error::{Error, Result};
use crate::kernels::conv::{
    conv2d_backward_b, conv2d_backward_w, conv2d_backward_x, conv2d_forward,
};
use crate::kernels::norm::{
    batchnorm_backward, batchnorm_forward, grn_backward, grn_forward, layernorm_ch_backward,
    layernorm_ch_forward, BatchNormSaved, GrnSaved, LayerNormSaved,
};
use crate::kernels::pad::{
    crop_backward_x, crop_forward, reflect_pad_backward_x, reflect_pad_forward, Pad2,
};
use crate::kernels::pool::{
    maxpool2_backward_x, maxpool2_forward, upsample2_backward_x, upsample2_forward,
};
pub use crate::kernels::pool::UpsampleMode;
use crate::nn::ConvSpec;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<E: Element> {
    Leaf,
    Add(usize, usize),
    /// NCHW plus a per-channel vector, broadcast over (N, H, W).
    AddBias { x: usize, b: usize },
    Sub(usize, usize),
    Mul(usize, usize),
    /// NCHW times a per-channel vector.
    MulChannel { x: usize, s: usize },
    AddScalar(usize),
    MulScalar(usize, f64),
    Matmul(usize, usize),
    Sum(usize),
    Mean(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    MaxPool2 { x: usize, argmax: Vec<u32> },
    Upsample2 { x: usize, mode: UpsampleMode },
    ConcatCh(usize, usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        saved: BatchNormSaved<E>,
    },
    LayerNormCh {
        x: usize,
        gamma: usize,
        beta: usize,
        saved: LayerNormSaved<E>,
    },
    Grn {
        x: usize,
        gamma: usize,
        beta: usize,
        saved: GrnSaved<E>,
    },
    BceMean { logits: usize, targets: Tensor<E> },
    ReflectPad { x: usize, pad: Pad2 },
    Crop { x: usize, top: usize, left: usize },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Append-only operation recorder; see the module docs.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    param_order: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_order: Vec::new(),
            param_lookup: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        // Forward ops on finite inputs must not manufacture NaNs.
        debug_assert!(
            !value.data().iter().any(|v| v.is_nan()),
            "NaN produced by a forward op"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (an input or parameter).
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data, targets, frozen stats).
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Named parameter leaf. Repeated registrations of the same name return
    /// the same node, so a parameter used by several consumers accumulates
    /// one gradient.
    pub fn param(&mut self, name: &str, value: Tensor<E>) -> Var {
        if let Some(&v) = self.param_lookup.get(name) {
            return v;
        }
        let v = self.leaf(value);
        self.param_order.push((name.to_string(), v));
        self.param_lookup.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Parameters in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.param_order
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ----- elementwise & scalar ops -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() == vb.shape() {
            let out = va.zip_map(vb, |x, y| x + y)?;
            let rg = self.rg(a) || self.rg(b);
            Ok(self.push(out, Op::Add(a.0, b.0), rg))
        } else if is_channel_vector(vb, va) {
            let out = broadcast_channel(va, vb, |x, s| x + s)?;
            let rg = self.rg(a) || self.rg(b);
            Ok(self.push(out, Op::AddBias { x: a.0, b: b.0 }, rg))
        } else if is_channel_vector(va, vb) {
            self.add(b, a)
        } else {
            Err(Error::shapes("add", va.shape(), vb.shape()))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shapes("sub", va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() == vb.shape() {
            let out = va.zip_map(vb, |x, y| x * y)?;
            let rg = self.rg(a) || self.rg(b);
            Ok(self.push(out, Op::Mul(a.0, b.0), rg))
        } else if is_channel_vector(vb, va) {
            let out = broadcast_channel(va, vb, |x, s| x * s)?;
            let rg = self.rg(a) || self.rg(b);
            Ok(self.push(out, Op::MulChannel { x: a.0, s: b.0 }, rg))
        } else if is_channel_vector(va, vb) {
            self.mul(b, a)
        } else {
            Err(Error::shapes("mul", va.shape(), vb.shape()))
        }
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cv = E::from_f64(c);
        let out = self.nodes[a.0].value.map(|x| x + cv);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a.0), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let cv = E::from_f64(c);
        let out = self.nodes[a.0].value.map(|x| x * cv);
        let rg = self.rg(a);
        self.push(out, Op::MulScalar(a.0, c), rg)
    }

    /// 2-D matrix product (m, k) x (k, n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = matmul2(va, vb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul(a.0, b.0), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0]
            .value
            .data()
            .iter()
            .fold(E::ZERO, |acc, &v| acc + v);
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let total = self.nodes[a.0]
            .value
            .data()
            .iter()
            .fold(E::ZERO, |acc, &v| acc + v);
        let rg = self.rg(a);
        self.push(
            Tensor::scalar(total / E::from_f64(n as f64)),
            Op::Mean(a.0),
            rg,
        )
    }

    // ----- activations -----

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x.maximum(E::ZERO));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a.0), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| {
            let xf = x.to_f64();
            let u = GELU_C * (xf + GELU_A * xf * xf * xf);
            E::from_f64(0.5 * xf * (1.0 + u.tanh()))
        });
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(sigmoid_stable);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a.0), rg)
    }

    // ----- structured ops -----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let bv = b.map(|v| &self.nodes[v.0].value);
        let out = conv2d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, bv, spec)?;
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |v| self.rg(v));
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                spec: spec.clone(),
            },
            rg,
        ))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = maxpool2_forward(&self.nodes[x.0].value)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2 { x: x.0, argmax }, rg))
    }

    pub fn upsample2(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let out = upsample2_forward(&self.nodes[x.0].value, mode)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2 { x: x.0, mode }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n1, c1, h1, w1) = va.dims4()?;
        let (n2, c2, h2, w2) = vb.dims4()?;
        if (n1, h1, w1) != (n2, h2, w2) {
            return Err(Error::shapes("concat_channels", va.shape(), vb.shape()));
        }
        let hw = h1 * w1;
        let mut out = vec![E::ZERO; n1 * (c1 + c2) * hw];
        for ni in 0..n1 {
            let dst = ni * (c1 + c2) * hw;
            out[dst..dst + c1 * hw].copy_from_slice(&va.data()[ni * c1 * hw..(ni + 1) * c1 * hw]);
            out[dst + c1 * hw..dst + (c1 + c2) * hw]
                .copy_from_slice(&vb.data()[ni * c2 * hw..(ni + 1) * c2 * hw]);
        }
        let out = Tensor::new(vec![n1, c1 + c2, h1, w1], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCh(a.0, b.0), rg))
    }

    /// Train-mode batch norm. Also returns the per-channel batch mean and
    /// biased variance so the layer can update its running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<E>, Vec<E>)> {
        let (out, saved) = batchnorm_forward(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            eps,
        )?;
        let mean = saved.mean.clone();
        let var = saved.var.clone();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                saved,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    pub fn layernorm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, saved) = layernorm_ch_forward(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            eps,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNormCh {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                saved,
            },
            rg,
        ))
    }

    pub fn grn(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, saved) = grn_forward(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::Grn {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                saved,
            },
            rg,
        ))
    }

    /// Numerically stable binary cross-entropy from logits, mean reduction:
    /// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &Tensor<E>) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.shape() != targets.shape() {
            return Err(Error::shapes("bce", lv.shape(), targets.shape()));
        }
        let n = lv.numel() as f64;
        let mut total = 0.0;
        for (&z, &y) in lv.data().iter().zip(targets.data().iter()) {
            let zf = z.to_f64();
            let yf = y.to_f64();
            total += zf.max(0.0) - zf * yf + (-zf.abs()).exp().ln_1p();
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(E::from_f64(total / n)),
            Op::BceMean {
                logits: logits.0,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: Pad2) -> Result<Var> {
        if pad.is_zero() {
            return Ok(x);
        }
        let out = reflect_pad_forward(&self.nodes[x.0].value, pad)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::ReflectPad { x: x.0, pad }, rg))
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, _, h, w) = self.nodes[x.0].value.dims4()?;
        if top == 0 && left == 0 && out_h == h && out_w == w {
            return Ok(x);
        }
        let out = crop_forward(&self.nodes[x.0].value, top, left, out_h, out_w)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Crop { x: x.0, top, left }, rg))
    }

    // ----- backward -----

    /// Reverse sweep from a scalar root. Populates a gradient for every node
    /// that `root` depends on (and that requires one); untouched nodes get
    /// `None`.
    pub fn backward(&self, root: Var) -> Result<Gradients<E>> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(Error::NotScalar(root_val.numel()));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(&[1]));

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let go = grads[id].take().unwrap();
            self.backprop_node(id, &go, &mut grads)?;
            grads[id] = Some(go);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        id: usize,
        go: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, go.clone())?;
                self.accumulate(grads, *b, go.clone())?;
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, go.clone())?;
                self.accumulate(grads, *b, sum_per_channel(go)?)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, go.clone())?;
                self.accumulate(grads, *b, go.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, go.zip_map(val(*b), |g, v| g * v)?)?;
                self.accumulate(grads, *b, go.zip_map(val(*a), |g, v| g * v)?)?;
            }
            Op::MulChannel { x, s } => {
                self.accumulate(grads, *x, broadcast_channel(go, val(*s), |g, sv| g * sv)?)?;
                let gx = go.zip_map(val(*x), |g, v| g * v)?;
                self.accumulate(grads, *s, sum_per_channel(&gx)?)?;
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, go.clone())?;
            }
            Op::MulScalar(a, c) => {
                let cv = E::from_f64(*c);
                self.accumulate(grads, *a, go.map(|g| g * cv))?;
            }
            Op::Matmul(a, b) => {
                let da = matmul2_nt(go, val(*b))?;
                let db = matmul2_tn(val(*a), go)?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Sum(a) => {
                let g = go.scalar_value()?;
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g))?;
            }
            Op::Mean(a) => {
                let g = go.scalar_value()?;
                let n = E::from_f64(val(*a).numel() as f64);
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g / n))?;
            }
            Op::Relu(a) => {
                self.accumulate(
                    grads,
                    *a,
                    go.zip_map(val(*a), |g, x| if x > E::ZERO { g } else { E::ZERO })?,
                )?;
            }
            Op::Gelu(a) => {
                let dx = go.zip_map(val(*a), |g, x| {
                    let xf = x.to_f64();
                    let u = GELU_C * (xf + GELU_A * xf * xf * xf);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * xf * xf);
                    E::from_f64(g.to_f64() * (0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du))
                })?;
                self.accumulate(grads, *a, dx)?;
            }
            Op::Sigmoid(a) => {
                let y = val(id);
                let dx = go.zip_map(y, |g, yv| g * yv * (E::ONE - yv))?;
                self.accumulate(grads, *a, dx)?;
            }
            Op::Conv2d { x, w, b, spec } => {
                let (_, _, h, wd) = val(*x).dims4()?;
                if self.nodes[*x].requires_grad {
                    self.accumulate(grads, *x, conv2d_backward_x(go, val(*w), spec, h, wd)?)?;
                }
                if self.nodes[*w].requires_grad {
                    self.accumulate(grads, *w, conv2d_backward_w(go, val(*x), spec)?)?;
                }
                if let Some(b) = b {
                    if self.nodes[*b].requires_grad {
                        self.accumulate(grads, *b, conv2d_backward_b(go)?)?;
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(grads, *x, maxpool2_backward_x(go, argmax, val(*x).shape())?)?;
            }
            Op::Upsample2 { x, mode } => {
                self.accumulate(grads, *x, upsample2_backward_x(go, *mode, val(*x).shape())?)?;
            }
            Op::ConcatCh(a, b) => {
                let (n, c1, h, w) = val(*a).dims4()?;
                let (_, c2, _, _) = val(*b).dims4()?;
                let hw = h * w;
                let gs = go.data();
                let mut da = vec![E::ZERO; n * c1 * hw];
                let mut db = vec![E::ZERO; n * c2 * hw];
                for ni in 0..n {
                    let src = ni * (c1 + c2) * hw;
                    da[ni * c1 * hw..(ni + 1) * c1 * hw]
                        .copy_from_slice(&gs[src..src + c1 * hw]);
                    db[ni * c2 * hw..(ni + 1) * c2 * hw]
                        .copy_from_slice(&gs[src + c1 * hw..src + (c1 + c2) * hw]);
                }
                self.accumulate(grads, *a, Tensor::new(val(*a).shape().to_vec(), da)?)?;
                self.accumulate(grads, *b, Tensor::new(val(*b).shape().to_vec(), db)?)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dgamma, dbeta) = batchnorm_backward(go, val(*gamma), saved)?;
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, dgamma)?;
                self.accumulate(grads, *beta, dbeta)?;
            }
            Op::LayerNormCh {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dgamma, dbeta) = layernorm_ch_backward(go, val(*gamma), saved)?;
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, dgamma)?;
                self.accumulate(grads, *beta, dbeta)?;
            }
            Op::Grn {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dgamma, dbeta) = grn_backward(go, val(*x), val(*gamma), saved)?;
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, dgamma)?;
                self.accumulate(grads, *beta, dbeta)?;
            }
            Op::BceMean { logits, targets } => {
                let g = go.scalar_value()?;
                let n = E::from_f64(val(*logits).numel() as f64);
                let dz = val(*logits).zip_map(targets, |z, y| {
                    (sigmoid_stable(z) - y) * g / n
                })?;
                self.accumulate(grads, *logits, dz)?;
            }
            Op::ReflectPad { x, pad } => {
                self.accumulate(grads, *x, reflect_pad_backward_x(go, *pad, val(*x).shape())?)?;
            }
            Op::Crop { x, top, left } => {
                self.accumulate(grads, *x, crop_backward_x(go, *top, *left, val(*x).shape())?)?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], id: usize, delta: Tensor<E>) -> Result<()> {
        if !self.nodes[id].requires_grad {
            return Ok(());
        }
        match &mut grads[id] {
            Some(g) => {
                let summed = g.zip_map(&delta, |a, b| a + b)?;
                *g = summed;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn sigmoid_stable<E: Element>(z: E) -> E {
    let zf = z.to_f64();
    let y = if zf >= 0.0 {
        1.0 / (1.0 + (-zf).exp())
    } else {
        let e = zf.exp();
        e / (1.0 + e)
    };
    E::from_f64(y)
}

/// True if `v` is a per-channel vector `[C]` matching NCHW tensor `x`.
fn is_channel_vector<E: Element>(v: &Tensor<E>, x: &Tensor<E>) -> bool {
    matches!((v.shape(), x.shape()), ([c], [_, cx, _, _]) if c == cx)
}

fn broadcast_channel<E: Element>(
    x: &Tensor<E>,
    v: &Tensor<E>,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xs = x.data();
    let vs = v.data();
    let mut out = vec![E::ZERO; xs.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for i in 0..hw {
                out[base + i] = f(xs[base + i], vs[ci]);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn sum_per_channel<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xs = x.data();
    let mut out = vec![E::ZERO; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for i in 0..hw {
                out[ci] += xs[base + i];
            }
        }
    }
    Tensor::new(vec![c], out)
}

fn matmul2<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        s => return Err(Error::ShapeMismatch(format!("matmul lhs must be 2-D, got {s:?}"))),
    };
    let (k2, n) = match b.shape() {
        [k2, n] => (*k2, *n),
        s => return Err(Error::ShapeMismatch(format!("matmul rhs must be 2-D, got {s:?}"))),
    };
    if k != k2 {
        return Err(Error::shapes("matmul", a.shape(), b.shape()));
    }
    let (av, bv) = (a.data(), b.data());
    let mut out = vec![E::ZERO; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = av[i * k + kk];
            for j in 0..n {
                out[i * n + j] += aik * bv[kk * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `go (m,n) x b^T (n,k) -> (m,k)`
fn matmul2_nt<E: Element>(go: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, n) = (go.shape()[0], go.shape()[1]);
    let k = b.shape()[0];
    let (gv, bv) = (go.data(), b.data());
    let mut out = vec![E::ZERO; m * k];
    for i in 0..m {
        for kk in 0..k {
            let mut acc = E::ZERO;
            for j in 0..n {
                acc += gv[i * n + j] * bv[kk * n + j];
            }
            out[i * k + kk] = acc;
        }
    }
    Tensor::new(vec![m, k], out)
}

/// `a^T (k,m) x go (m,n) -> (k,n)`
fn matmul2_tn<E: Element>(a: &Tensor<E>, go: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = go.shape()[1];
    let (av, gv) = (a.data(), go.data());
    let mut out = vec![E::ZERO; k * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = av[i * k + kk];
            for j in 0..n {
                out[kk * n + j] += aik * gv[i * n + j];
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::new(
            vec![rows.len(), 2],
            rows.iter().flatten().copied().collect(),
        )
        .unwrap()
    }

    #[test]
    fn add_is_elementwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = tape.leaf(t2(&[[1.0, 1.0], [1.0, 1.0]]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[[1.5, -2.0], [0.0, 7.25]]));
        let ones = tape.constant(Tensor::ones(&[2, 2]));
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn add_rejects_incompatible_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        // d(sum(x*x))/dx = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum(sq);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn gradient_of_linear_map() {
        // backward(sum(3*x)) -> grad = [3, 3]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        let y = tape.mul_scalar(x, 3.0);
        let root = tape.sum(y);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[4]));
        let s = tape.sigmoid(x);
        let root = tape.sum(s);
        let grads = tape.backward(root).unwrap();
        for &g in grads.get(x).unwrap().data() {
            assert!((g - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(&[2, 2]));
        let y = tape.mul_scalar(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(4))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(&[2]));
        let c = tape.constant(Tensor::ones(&[2]));
        let y = tape.mul(x, c).unwrap();
        let root = tape.sum(y);
        let grads = tape.backward(root).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        // y = x*x + x => dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let root = tape.sum(y);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn backward_replay_is_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![0.3, -0.7, 1.1, 2.0]).unwrap());
        let g = tape.gelu(x);
        let s = tape.sigmoid(g);
        let root = tape.mean(s);
        let first = tape.backward(root).unwrap();
        let second = tape.backward(root).unwrap();
        assert_eq!(
            first.get(x).unwrap().data(),
            second.get(x).unwrap().data()
        );
    }

    #[test]
    fn bce_at_zero_logit_is_ln_two() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let targets = Tensor::ones(&[1, 1, 2, 2]);
        let loss = tape.bce_with_logits_mean(z, &targets).unwrap();
        let v: f64 = tape.value(loss).scalar_value().unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::full(&[1, 1, 1, 1], 50.0));
        let targets = Tensor::ones(&[1, 1, 1, 1]);
        let loss = tape.bce_with_logits_mean(z, &targets).unwrap();
        let v: f64 = tape.value(loss).scalar_value().unwrap();
        assert!(v.is_finite() && v < 1e-20, "loss {v}");

        // and the opposite sign
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::full(&[1, 1, 1, 1], -50.0));
        let targets = Tensor::zeros(&[1, 1, 1, 1]);
        let loss = tape.bce_with_logits_mean(z, &targets).unwrap();
        let v: f64 = tape.value(loss).scalar_value().unwrap();
        assert!(v.is_finite() && v < 1e-20, "loss {v}");
    }

    #[test]
    fn param_registration_dedupes_by_name() {
        let mut tape = Tape::new();
        let w = Tensor::<f64>::ones(&[2]);
        let a = tape.param("w", w.clone());
        let b = tape.param("w", w);
        assert_eq!(a, b);
        assert_eq!(tape.params().len(), 1);
    }

    #[test]
    fn maxpool_takes_block_maximum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        assert!(matches!(
            {
                let mut t2 = Tape::<f64>::new();
                let odd = t2.leaf(Tensor::ones(&[1, 1, 3, 3]));
                t2.maxpool2(odd)
            },
            Err(Error::OddSpatialDim { h: 3, w: 3 })
        ));
    }

    #[test]
    fn nearest_upsample_replicates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap());
        let y = tape.upsample2(x, UpsampleMode::Nearest).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64) * 0.17 - 1.3));
            let g = tape.gelu(x);
            let s = tape.sigmoid(g);
            let m = tape.mean(s);
            tape.value(m).scalar_value().unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
