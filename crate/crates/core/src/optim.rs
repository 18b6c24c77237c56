//! AdamW with decoupled weight decay, and the cosine-annealing schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<T> {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor<T> {
        &self.second[i]
    }
}

/// One AdamW update. `grads` is aligned with `params`; `None` means the
/// parameter did not take part in the loss (treated as a zero gradient).
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<&Tensor<T>>],
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::Contract(format!("learning rate must be >= 0, got {lr}")));
    }
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::shape("adamw_step", &[params.len()], &[grads.len()]));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape("adamw_step", params.get(id).shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    name: params.name(id).to_string(),
                });
            }
        }
    }

    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step_size = T::of(lr / bc1);
    let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
    let eps = T::of(cfg.eps);
    let decay = T::of(1.0 - lr * cfg.weight_decay);

    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let gj = grads[i].map_or(T::zero(), |g| g.data()[j]);
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            if lr == 0.0 {
                continue;
            }
            let denom = v[j].sqrt() * inv_bc2_sqrt + eps;
            pd[j] = pd[j] * decay - step_size * m[j] / denom;
        }
    }
    Ok(())
}

/// `base_lr · (1 + cos(π · step / total_steps)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Contract(format!(
            "cosine_lr needs 0 <= step <= total_steps > 0, got step {step} of {total_steps}"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(base_lr * (1.0 + phase.cos()) / 2.0)
}

/// Learning rate after the linear batch-size scaling rule `base_lr · batch / 256`.
pub fn scaled_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}
