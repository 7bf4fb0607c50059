//! AdamW with decoupled weight decay and a linear-warmup/cosine-decay
//! learning-rate schedule.

use serde::Serialize;

use crate::losses::{Algo, Beta};

use super::{ParamSet, PolicyError};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Training hyperparameters, shared by the SFT and LHP loops. `beta` and
/// `algo` only matter for LHP.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    pub beta: Beta,
    pub algo: Algo,
}

impl TrainConfig {
    /// Defaults for supervised fine-tuning at toy scale.
    pub fn sft_defaults() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            epochs: 3,
            weight_decay: 0.05,
            warmup_ratio: 0.1,
            seed: 42,
            beta: Beta::new(0.1).expect("0.1 is positive"),
            algo: Algo::Dpo,
        }
    }

    /// Defaults for preference training at toy scale.
    pub fn lhp_defaults() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            ..Self::sft_defaults()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.learning_rate < 0.0 {
            return Err(PolicyError::InvalidConfig(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(PolicyError::InvalidConfig(
                "batch_size and epochs must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(PolicyError::InvalidConfig(format!(
                "warmup_ratio must be in [0,1], got {}",
                self.warmup_ratio
            )));
        }
        Ok(())
    }
}

/// Schedule multiplier at `step_fraction` of training: linear from 0 to 1
/// over the warmup span, then cosine from 1 down to 0 at the end.
pub fn lr_scale(step_fraction: f64, warmup_ratio: f64) -> f64 {
    let sf = step_fraction.clamp(0.0, 1.0);
    if sf < warmup_ratio {
        return sf / warmup_ratio;
    }
    if warmup_ratio >= 1.0 {
        return sf;
    }
    let progress = (sf - warmup_ratio) / (1.0 - warmup_ratio);
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        OptimizerState {
            m: ParamSet::zeros_like(params),
            v: ParamSet::zeros_like(params),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with the schedule applied: decoupled weight decay, bias
/// correction, and effective learning rate
/// `cfg.learning_rate * lr_scale(step_fraction, cfg.warmup_ratio)`.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    step_fraction: f64,
) -> Result<(), PolicyError> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) {
        return Err(PolicyError::ShapeMismatch(
            "parameters, gradients, and optimizer moments must align".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = cfg.learning_rate * lr_scale(step_fraction, cfg.warmup_ratio);
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);

    for ((p_t, g_t), (m_t, v_t)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()))
    {
        for i in 0..p_t.len() {
            let g = g_t[i];
            m_t[i] = ADAM_BETA1 * m_t[i] + (1.0 - ADAM_BETA1) * g;
            v_t[i] = ADAM_BETA2 * v_t[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m_t[i] / bias1;
            let v_hat = v_t[i] / bias2;
            p_t[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + cfg.weight_decay * p_t[i]);
        }
    }
    Ok(())
}
