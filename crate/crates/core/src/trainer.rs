//! Optimisation machinery shared by the matcher and the captioner: warmup /
//! linear-decay schedule, global-norm clipping, and Adam with decoupled
//! weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub init_lr: f64,
    /// Learning rate reached at `total_steps`.
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            init_lr: 1e-7,
            final_lr: 0.0,
            warmup_steps: 4000,
            total_steps: 10_000,
            weight_decay: 1e-5,
            clip_norm: 0.1,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.init_lr > 0.0 && self.init_lr <= self.base_lr) {
            return Err(Error::Config(format!(
                "need 0 < init_lr ({}) <= base_lr ({})",
                self.init_lr, self.base_lr
            )));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Linear ramp `init_lr → base_lr` over `[0, warmup]`, then linear decay to
/// `final_lr` at `total_steps`.
pub fn lr_at_step(step: usize, cfg: &OptimConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return Ok(cfg.base_lr);
        }
        let frac = step as f64 / cfg.warmup_steps as f64;
        return Ok(cfg.init_lr + (cfg.base_lr - cfg.init_lr) * frac);
    }
    let frac = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.base_lr + (cfg.final_lr - cfg.base_lr) * frac)
}

pub fn global_norm(grads: &[Mat]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient by `clip_norm / g` when the global L2 norm `g`
/// exceeds `clip_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Mat], clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let k = clip_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn zeros_like(params: &[&Mat]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
        }
    }
}

pub fn adam_step(
    params: &mut [&mut Mat],
    grads: &[Mat],
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() && state.step == 0 {
        let views: Vec<&Mat> = params.iter().map(|p| &**p).collect();
        *state = AdamState::zeros_like(&views);
    }
    if state.m.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || state.m[k].dim() != p.dim() {
            return Err(Error::Shape(format!(
                "tensor {k}: parameter {:?}, gradient {:?}",
                p.dim(),
                g.dim()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        ndarray::Zip::from(&mut **p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * cfg.weight_decay * *p;
                *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
            });
    }
    Ok(())
}
