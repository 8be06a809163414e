//! Weight-update rules and learning-rate schedules.
//!
//! Latent weights live in [-1, 1] and are clipped back after every update;
//! the binary-gradient path feeds optimizers sgn(dW)/sqrt(N) so the update
//! magnitude is independent of the raw gradient scale. Momenta are computed
//! in f32 and rounded to their storage format on store.

use crate::quant::BitTensor;
use crate::tensor::{f16_round, StorageDtype, Tensor};

/// Optimizer family plus hyperparameters.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum OptimizerKind {
    Adam { beta1: f32, beta2: f32, eps: f32 },
    SgdMomentum { momentum: f32 },
    Bop { gamma: f32, tau: f32 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_momentum() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }

    /// Adaptivity rate and flip threshold follow the Bop authors' defaults.
    pub fn bop() -> Self {
        OptimizerKind::Bop {
            gamma: 1e-4,
            tau: 1e-8,
        }
    }

    /// Momenta tensors kept per parameter: 2 for Adam (m, v), 1 otherwise.
    pub fn momenta_slots(&self) -> usize {
        match self {
            OptimizerKind::Adam { .. } => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::SgdMomentum { .. } => "sgd_momentum",
            OptimizerKind::Bop { .. } => "bop",
        }
    }
}

/// Per-parameter optimizer state: first and (for Adam) second momenta plus
/// the bias-correction step counter.
#[derive(Clone, Debug)]
pub struct ParamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    store: StorageDtype,
}

impl ParamState {
    pub fn new(len: usize, kind: &OptimizerKind, store: StorageDtype) -> Self {
        let v = if matches!(kind, OptimizerKind::Adam { .. }) {
            vec![0.0; len]
        } else {
            Vec::new()
        };
        ParamState {
            m: vec![0.0; len],
            v,
            t: 0,
            store,
        }
    }

    fn round(&self, x: f32) -> f32 {
        match self.store {
            StorageDtype::F16 => f16_round(x),
            _ => x,
        }
    }
}

/// Expands binary weight gradients to +-1/sqrt(fan_in), the attenuation the
/// update phase applies before optimizing.
pub fn attenuate_binary_gradient(dw_hat: &BitTensor, fan_in: usize) -> Tensor {
    assert!(fan_in >= 1);
    let scale = 1.0 / (fan_in as f32).sqrt();
    let mut t = dw_hat.decode();
    for v in t.values_mut() {
        *v *= scale;
    }
    t
}

fn clip_unit(w: f32) -> f32 {
    w.clamp(-1.0, 1.0)
}

/// One Adam step with bias correction. `clip` keeps latent weights inside
/// [-1, 1]; bias parameters pass `false`.
pub fn adam_update(
    w: &mut [f32],
    g: &[f32],
    state: &mut ParamState,
    eta: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    clip: bool,
    w_store: StorageDtype,
) {
    assert_eq!(w.len(), g.len());
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..w.len() {
        let m = state.round(beta1 * state.m[i] + (1.0 - beta1) * g[i]);
        let v = state.round(beta2 * state.v[i] + (1.0 - beta2) * g[i] * g[i]);
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        let mut next = w[i] - eta * m_hat / (v_hat.sqrt() + eps);
        if clip {
            next = clip_unit(next);
        }
        w[i] = match w_store {
            StorageDtype::F16 => f16_round(next),
            _ => next,
        };
    }
}

/// Heavy-ball SGD: m <- mu*m + g; w <- clip(w - eta*m).
pub fn sgd_momentum_update(
    w: &mut [f32],
    g: &[f32],
    state: &mut ParamState,
    eta: f32,
    momentum: f32,
    clip: bool,
    w_store: StorageDtype,
) {
    assert_eq!(w.len(), g.len());
    state.t += 1;
    for i in 0..w.len() {
        let m = state.round(momentum * state.m[i] + g[i]);
        state.m[i] = m;
        let mut next = w[i] - eta * m;
        if clip {
            next = clip_unit(next);
        }
        w[i] = match w_store {
            StorageDtype::F16 => f16_round(next),
            _ => next,
        };
    }
}

/// Bop: weights are pure signs; flip w[i] when the gradient EMA exceeds the
/// threshold while agreeing with the current sign.
pub fn bop_update(w: &mut [f32], g: &[f32], state: &mut ParamState, gamma: f32, tau: f32) {
    assert_eq!(w.len(), g.len());
    state.t += 1;
    for i in 0..w.len() {
        let m = state.round((1.0 - gamma) * state.m[i] + gamma * g[i]);
        state.m[i] = m;
        if m.abs() > tau && (m > 0.0) == (w[i] > 0.0) {
            w[i] = -w[i];
        }
    }
}

/// Learning-rate schedule state.
#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    /// Decay by `factor` after `patience` evaluations without a dev-accuracy
    /// improvement.
    DevBased {
        patience: usize,
        factor: f32,
        best: f32,
        stale: usize,
    },
    /// Decay by `factor` at each milestone epoch.
    FixedDecay { milestones: Vec<usize>, factor: f32 },
    Constant,
}

impl LrSchedule {
    pub fn dev_based(patience: usize, factor: f32) -> Self {
        LrSchedule::DevBased {
            patience,
            factor,
            best: f32::NEG_INFINITY,
            stale: 0,
        }
    }

    pub fn fixed_decay(milestones: Vec<usize>, factor: f32) -> Self {
        LrSchedule::FixedDecay { milestones, factor }
    }

    /// Advances the schedule after one epoch's evaluation and returns the new
    /// learning rate (never increasing).
    pub fn step(&mut self, eta: f32, dev_accuracy: f32, epoch: usize) -> f32 {
        match self {
            LrSchedule::DevBased {
                patience,
                factor,
                best,
                stale,
            } => {
                if dev_accuracy > *best {
                    *best = dev_accuracy;
                    *stale = 0;
                    eta
                } else {
                    *stale += 1;
                    if *stale >= *patience {
                        *stale = 0;
                        eta * *factor
                    } else {
                        eta
                    }
                }
            }
            LrSchedule::FixedDecay { milestones, factor } => {
                if milestones.contains(&epoch) {
                    eta * *factor
                } else {
                    eta
                }
            }
            LrSchedule::Constant => eta,
        }
    }
}
