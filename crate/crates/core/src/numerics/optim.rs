//! AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Dtype, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moment accumulators, one pair per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect::<Vec<_>>()
        };
        OptimState {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update. `grads` is aligned with the entries of `params`.
pub fn adamw_step(
    state: &mut OptimState,
    params: &mut ParamStore,
    grads: &[Tensor],
    lr: f64,
    dtype: Dtype,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::Param(format!("learning rate must be >= 0, got {lr}")));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (e, g) in params.entries().iter().zip(grads) {
        if e.value.shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("`{}`: {:?} vs grad {:?}", e.name, e.value.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(e.name.clone()));
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..grads.len() {
        let id = params.id(&params.entries()[i].name).expect("own name");
        let decay = if params.entries()[i].decay {
            cfg.weight_decay
        } else {
            0.0
        };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = params.get_mut(id).data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].data()) {
            *m = dtype.round(cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            *v = dtype.round(cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = dtype.round(*p * (1.0 - lr * decay) - lr * mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}

/// Linear warmup from `start_lr` to `peak_lr`, then cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupCosine {
    pub start_lr: f64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupCosine {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.start_lr + (self.peak_lr - self.start_lr) * frac;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let frac = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
