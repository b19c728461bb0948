//! Adam with bias correction.
//!
//! Defaults: beta1 = 0.9, beta2 = 0.99, eps = 1e-5, no weight decay. Moment
//! state is keyed by parameter name, created lazily at first update.

use std::collections::HashMap;

use crate::elem::Element;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-5,
        }
    }
}

struct Slot<E: Element> {
    m: Tensor<E>,
    v: Tensor<E>,
}

pub struct Adam<E: Element> {
    cfg: AdamConfig,
    /// Optimizer step count; drives bias correction.
    t: u64,
    lr: f64,
    slots: HashMap<String, Slot<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            lr: 0.0,
            slots: HashMap::new(),
        }
    }

    /// Begin one optimizer step at the given learning rate. Every
    /// [`Adam::update`] until the next `start_step` shares this step's bias
    /// correction.
    pub fn start_step(&mut self, lr: f64) {
        self.t += 1;
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// In-place parameter update from its gradient.
    pub fn update(&mut self, name: &str, param: &mut Tensor<E>, grad: &Tensor<E>) {
        debug_assert!(self.t > 0, "start_step before update");
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
        });
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);

        let m = slot.m.data_mut();
        let v = slot.v.data_mut();
        let p = param.data_mut();
        for ((pi, mi), (vi, &gi)) in p
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut().zip(grad.data().iter()))
        {
            let g = gi.to_f64();
            let mn = b1 * mi.to_f64() + (1.0 - b1) * g;
            let vn = b2 * vi.to_f64() + (1.0 - b2) * g * g;
            *mi = E::from_f64(mn);
            *vi = E::from_f64(vn);
            let m_hat = mn / bc1;
            let v_hat = vn / bc2;
            *pi = E::from_f64(pi.to_f64() - self.lr * m_hat / (v_hat.sqrt() + self.cfg.eps));
        }
    }
}
