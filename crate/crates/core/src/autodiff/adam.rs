//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

/// First/second moment buffers and step counter for each parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    config: AdamConfig,
    slots: Vec<Moments<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, config: AdamConfig) -> Self {
        let slots = params
            .into_iter()
            .map(|p| Moments { m: vec![T::zero(); p.numel()], v: vec![T::zero(); p.numel()], step: 0 })
            .collect();
        AdamState { config, slots }
    }

    pub fn steps_taken(&self) -> u64 {
        self.slots.first().map_or(0, |s| s.step)
    }
}

/// One Adam update of every parameter in place.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.slots.len() {
        return Err(Error::arg("adam_step: parameter, gradient and state counts differ"));
    }
    let cfg = state.config;
    let (b1, b2, eps) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.eps));
    for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut state.slots) {
        if p.numel() != g.len() || slot.m.len() != g.len() {
            return Err(Error::arg("adam_step: gradient shape does not match parameter"));
        }
        slot.step += 1;
        let t = slot.step as i32;
        let c1 = T::lit(1.0 - cfg.beta1.powi(t));
        let c2 = T::lit(1.0 - cfg.beta2.powi(t));
        let lr = T::lit(lr);
        for (((x, &gi), m), v) in p.data_mut().iter_mut().zip(*g).zip(&mut slot.m).zip(&mut slot.v) {
            *m = b1 * *m + (T::one() - b1) * gi;
            *v = b2 * *v + (T::one() - b2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
