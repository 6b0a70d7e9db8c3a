//! First-order update rules shared by the fast adaptation and the slow
//! meta-update.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtaError};
use crate::model::ParamSet;
use crate::objective::GradientSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainGd,
    AdaptiveMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::AdaptiveMoment, learning_rate: 2e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn plain_gd(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::PlainGd, learning_rate, ..Self::default() }
    }

    pub fn adaptive_moment(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TtaError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.kind == OptimizerKind::AdaptiveMoment {
            for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
                if !(b > 0.0 && b < 1.0) {
                    return Err(TtaError::Config(format!("{name} must lie in (0, 1), got {b}")));
                }
            }
            if !(self.epsilon > 0.0) {
                return Err(TtaError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
            }
        }
        Ok(())
    }
}

/// Moment accumulators and step count. Empty until the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl OptimizerState {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }

    pub fn reset(&mut self) {
        self.first.clear();
        self.second.clear();
        self.steps = 0;
    }
}

/// An update rule bound to its own state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, state: OptimizerState::default() })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Discard accumulated moments and the step count.
    pub fn reset_state(&mut self) {
        self.state.reset();
    }

    pub fn step(&mut self, params: &mut ParamSet, grad: &GradientSet) -> Result<()> {
        step(params, grad, &mut self.state, &self.cfg)
    }
}

pub fn step(
    params: &mut ParamSet,
    grad: &GradientSet,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if !params.same_shape(grad.as_params()) {
        return Err(TtaError::Dimension {
            what: "gradient parameter count",
            expected: params.len(),
            got: grad.as_params().len(),
        });
    }
    let lr = cfg.learning_rate;
    match cfg.kind {
        OptimizerKind::PlainGd => {
            for (p, g) in params.values_mut().zip(grad.values()) {
                *p -= lr * g;
            }
            state.steps += 1;
        }
        OptimizerKind::AdaptiveMoment => {
            let n = params.len();
            if state.first.len() != n {
                state.first = vec![0.0; n];
                state.second = vec![0.0; n];
            }
            state.steps += 1;
            let t = state.steps as i32;
            let (b1, b2) = (cfg.beta1, cfg.beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let moments = state.first.iter_mut().zip(state.second.iter_mut());
            for ((p, &g), (m, v)) in params.values_mut().zip(grad.values()).zip(moments) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
    Ok(())
}
