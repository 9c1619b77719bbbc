//! AdamW with decoupled weight decay, warmup/cosine schedule and global-norm
//! gradient clipping.

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments for every store entry, plus the update count.
/// Entries the optimizer never touches keep zero moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or infinity; nothing was changed.
    SkippedNonFinite,
}

/// One AdamW update over the trainable entries of `store`. Missing
/// gradients count as zero. Decay applies to [`ParamKind::Weight`] only.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    hyper: &AdamW,
    lr: f64,
) -> Result<StepOutcome> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape("adamw", &[store.len()], &[grads.len(), state.m.len()]));
    }
    for (id, g) in store.ids().zip(grads) {
        if let Some(g) = g {
            if g.shape() != store.value(id).shape() {
                return Err(Error::shape("adamw", store.value(id).shape(), g.shape()));
            }
            if store.entry(id).trainable() && !g.is_finite() {
                return Ok(StepOutcome::SkippedNonFinite);
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c = |v: f64| T::from_f64_lossy(v);
    let (b1, b2, eps) = (c(hyper.beta1), c(hyper.beta2), c(hyper.eps));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let bc1 = c(1.0 - hyper.beta1.powi(t));
    let bc2 = c(1.0 - hyper.beta2.powi(t));
    let lr_t = c(lr);
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).trainable()).collect();
    for id in ids {
        let i = id.index();
        let decay = if store.entry(id).kind == ParamKind::Weight {
            T::one() - c(lr * hyper.weight_decay)
        } else {
            T::one()
        };
        let g = grads[i].as_ref().map(|g| g.data());
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = store.value_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = g.map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = p[j] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}

/// Global L2 norm of the trainable gradients, accumulated in f64.
pub fn grad_norm<T: Real>(store: &ParamStore<T>, grads: &[Option<Tensor<T>>]) -> f64 {
    store
        .ids()
        .zip(grads)
        .filter(|(id, _)| store.entry(*id).trainable())
        .filter_map(|(_, g)| g.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &ParamStore<T>, grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grad_norm(store, grads);
    if norm.is_finite() && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / (norm + 1e-6));
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Linear warmup from zero to `base_lr`, then cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub base_lr: f64,
    pub min_lr: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps", "must not exceed total_steps"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if !(self.min_lr.is_finite() && (0.0..=self.base_lr).contains(&self.min_lr)) {
            return Err(Error::config("min_lr", "must lie in [0, lr]"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::OutOfRange {
                what: "schedule",
                index: step as usize,
                size: self.total_steps as usize + 1,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.base_lr);
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        Ok(self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
