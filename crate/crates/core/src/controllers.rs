//! Online adaptation regimes over a test stream.
//!
//! Every controller consumes samples strictly in order through
//! [`Controller::step`]. [`Dsuta`] is the fast-slow controller: each sample
//! is predicted with parameters adapted for `N` steps from the slow
//! meta-parameters, and the meta-parameters take one mini-batch step every
//! `M` samples, or are restored to the source parameters when the reset
//! strategy fires.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::counters::StepCounters;
use crate::error::{Result, TtaError};
use crate::model::{forward, greedy_ctc_decode, FeatureSequence, ParamSet, TokenSequence};
use crate::objective::{
    batched_suta_loss_grad, suta_loss_from_logits, suta_loss_grad, DEFAULT_ALPHA, DEFAULT_TEMPERATURE,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::reset::{fixed_reset_step, lii, oracle_reset_step, DetectorEvent, DetectorState, ResetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Adaptation steps per sample (`N`).
    pub steps: usize,
    /// Meta-update buffer size (`M`).
    pub buffer_size: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub blank: usize,
    pub fast: OptimizerConfig,
    pub slow: OptimizerConfig,
    /// When false the slow update is the identity.
    pub meta_update: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            buffer_size: 5,
            alpha: DEFAULT_ALPHA,
            temperature: DEFAULT_TEMPERATURE,
            blank: 0,
            fast: OptimizerConfig::default(),
            slow: OptimizerConfig::default(),
            meta_update: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer_size == 0 {
            return Err(TtaError::Config("buffer size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TtaError::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.temperature > 0.0) {
            return Err(TtaError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        self.fast.validate()?;
        self.slow.validate()
    }
}

/// Result of processing one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub prediction: TokenSequence,
    /// Loss before each adaptation step and after the last one (`N + 1` values).
    pub adapted_loss_trace: Vec<f64>,
    pub meta_updated: bool,
    pub reset_fired: bool,
    /// LII reading for this sample (dynamic reset only).
    pub lii: Option<f64>,
    /// z-test evaluated at this step (dynamic reset only).
    pub detector_event: Option<DetectorEvent>,
}

pub trait Controller {
    fn step(&mut self, x: &FeatureSequence) -> Result<StepOutcome>;

    fn counters(&self) -> StepCounters;

    /// Number of samples processed so far.
    fn position(&self) -> u64;
}

fn check_finite(value: f64, step: u64, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TtaError::NonFinite { step, iteration, detail: format!("objective evaluated to {value}") })
    }
}

/// Decode with `params` and evaluate the objective on the same logits.
fn predict(params: &ParamSet, x: &FeatureSequence, cfg: &AdaptConfig) -> Result<(TokenSequence, f64)> {
    let logits = forward(params, x)?;
    let loss = suta_loss_from_logits(&logits, cfg.alpha, cfg.temperature)?;
    Ok((greedy_ctc_decode(&logits, cfg.blank), loss.total))
}

/// Adapt in place for `cfg.steps` iterations with `optimizer`, then predict.
///
/// The loss/gradient evaluations are counted; the closing forward that
/// yields the prediction and the last trace entry is counted only when no
/// adaptation step ran.
fn adapt_and_predict(
    params: &mut ParamSet,
    x: &FeatureSequence,
    cfg: &AdaptConfig,
    optimizer: &mut Optimizer,
    counters: &mut StepCounters,
    t: u64,
) -> Result<(TokenSequence, Vec<f64>)> {
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for n in 0..cfg.steps {
        let (loss, grad) = suta_loss_grad(params, x, cfg.alpha, cfg.temperature)?;
        counters.record_grad();
        check_finite(loss.total, t, n)?;
        trace.push(loss.total);
        optimizer.step(params, &grad)?;
    }
    let (prediction, last) = predict(params, x, cfg)?;
    if cfg.steps == 0 {
        counters.record_inference();
    }
    check_finite(last, t, cfg.steps)?;
    trace.push(last);
    Ok((prediction, trace))
}

/// `N` steps from a fresh copy of `phi_start` with a fresh fast optimizer.
pub fn suta_adapt(phi_start: &ParamSet, x: &FeatureSequence, cfg: &AdaptConfig) -> Result<ParamSet> {
    let mut counters = StepCounters::default();
    let mut phi = phi_start.snapshot();
    let mut optimizer = Optimizer::new(cfg.fast)?;
    adapt_and_predict(&mut phi, x, cfg, &mut optimizer, &mut counters, 0)?;
    Ok(phi)
}

/// Inference with the fixed source parameters.
#[derive(Debug, Clone)]
pub struct SourceModel {
    params: ParamSet,
    cfg: AdaptConfig,
    counters: StepCounters,
    t: u64,
}

impl SourceModel {
    pub fn new(params: ParamSet, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { params, cfg, counters: StepCounters::default(), t: 0 })
    }
}

impl Controller for SourceModel {
    fn step(&mut self, x: &FeatureSequence) -> Result<StepOutcome> {
        self.t += 1;
        let (prediction, loss) = predict(&self.params, x, &self.cfg)?;
        self.counters.record_inference();
        Ok(StepOutcome {
            prediction,
            adapted_loss_trace: vec![loss],
            meta_updated: false,
            reset_fired: false,
            lii: None,
            detector_event: None,
        })
    }

    fn counters(&self) -> StepCounters {
        self.counters
    }

    fn position(&self) -> u64 {
        self.t
    }
}

/// Non-continual adaptation: every sample starts from the source parameters.
#[derive(Debug, Clone)]
pub struct Suta {
    phi_pre: ParamSet,
    cfg: AdaptConfig,
    counters: StepCounters,
    t: u64,
}

impl Suta {
    pub fn new(phi_pre: ParamSet, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { phi_pre, cfg, counters: StepCounters::default(), t: 0 })
    }
}

impl Controller for Suta {
    fn step(&mut self, x: &FeatureSequence) -> Result<StepOutcome> {
        self.t += 1;
        let mut phi = self.phi_pre.snapshot();
        let mut optimizer = Optimizer::new(self.cfg.fast)?;
        let (prediction, trace) =
            adapt_and_predict(&mut phi, x, &self.cfg, &mut optimizer, &mut self.counters, self.t)?;
        Ok(StepOutcome {
            prediction,
            adapted_loss_trace: trace,
            meta_updated: false,
            reset_fired: false,
            lii: None,
            detector_event: None,
        })
    }

    fn counters(&self) -> StepCounters {
        self.counters
    }

    fn position(&self) -> u64 {
        self.t
    }
}

/// Continual adaptation: one parameter set (and optimizer state) carried
/// across the whole stream, never reset.
#[derive(Debug, Clone)]
pub struct Csuta {
    phi: ParamSet,
    optimizer: Optimizer,
    cfg: AdaptConfig,
    counters: StepCounters,
    t: u64,
}

impl Csuta {
    pub fn new(phi_pre: ParamSet, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { phi: phi_pre, optimizer: Optimizer::new(cfg.fast)?, cfg, counters: StepCounters::default(), t: 0 })
    }

    pub fn params(&self) -> &ParamSet {
        &self.phi
    }
}

impl Controller for Csuta {
    fn step(&mut self, x: &FeatureSequence) -> Result<StepOutcome> {
        self.t += 1;
        let (prediction, trace) =
            adapt_and_predict(&mut self.phi, x, &self.cfg, &mut self.optimizer, &mut self.counters, self.t)?;
        Ok(StepOutcome {
            prediction,
            adapted_loss_trace: trace,
            meta_updated: false,
            reset_fired: false,
            lii: None,
            detector_event: None,
        })
    }

    fn counters(&self) -> StepCounters {
        self.counters
    }

    fn position(&self) -> u64 {
        self.t
    }
}

/// Reset strategy attached to a [`Dsuta`] controller.
#[derive(Debug, Clone)]
pub enum ResetPolicy {
    None,
    Fixed(u64),
    Oracle(BTreeSet<u64>),
    Dynamic(Box<DetectorState>),
}

impl ResetPolicy {
    /// Instantiate from a config; `boundaries` feeds the oracle variant.
    pub fn from_config(cfg: &ResetConfig, boundaries: &BTreeSet<u64>) -> Result<Self> {
        cfg.validate()?;
        Ok(match *cfg {
            ResetConfig::None => ResetPolicy::None,
            ResetConfig::Fixed { freq } => ResetPolicy::Fixed(freq),
            ResetConfig::Oracle => ResetPolicy::Oracle(boundaries.clone()),
            ResetConfig::Dynamic { construction, patience } => {
                ResetPolicy::Dynamic(Box::new(DetectorState::new(construction, patience)?))
            }
        })
    }
}

struct Buffered {
    x: FeatureSequence,
    /// LII measured against the frozen domain model, if one existed.
    lii: Option<f64>,
}

/// Fast-slow controller with optional model reset.
pub struct Dsuta {
    phi_pre: ParamSet,
    phi_t: ParamSet,
    buffer: Vec<Buffered>,
    t: u64,
    cfg: AdaptConfig,
    slow: Optimizer,
    policy: ResetPolicy,
    counters: StepCounters,
}

impl Dsuta {
    pub fn new(phi_pre: ParamSet, cfg: AdaptConfig, policy: ResetPolicy) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            phi_t: phi_pre.snapshot(),
            phi_pre,
            buffer: Vec::with_capacity(cfg.buffer_size),
            t: 0,
            slow: Optimizer::new(cfg.slow)?,
            cfg,
            policy,
            counters: StepCounters::default(),
        })
    }

    pub fn meta_params(&self) -> &ParamSet {
        &self.phi_t
    }

    pub fn source_params(&self) -> &ParamSet {
        &self.phi_pre
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn detector(&self) -> Option<&DetectorState> {
        match &self.policy {
            ResetPolicy::Dynamic(det) => Some(det),
            _ => None,
        }
    }

    pub fn slow_optimizer(&self) -> &Optimizer {
        &self.slow
    }

    fn apply_reset(&mut self, t: u64) -> Result<()> {
        self.phi_t.restore(&self.phi_pre)?;
        self.buffer.clear();
        self.slow.reset_state();
        if let ResetPolicy::Dynamic(det) = &mut self.policy {
            det.reset(t);
        }
        Ok(())
    }

    fn meta_update(&mut self) -> Result<bool> {
        let batch: Vec<FeatureSequence> = self.buffer.drain(..).map(|b| b.x).collect();
        if !self.cfg.meta_update {
            return Ok(false);
        }
        let (loss, grad) = batched_suta_loss_grad(&self.phi_t, &batch, self.cfg.alpha, self.cfg.temperature)?;
        self.counters.record_batched();
        check_finite(loss, self.t, self.cfg.steps)?;
        self.slow.step(&mut self.phi_t, &grad)?;
        Ok(true)
    }
}

impl Controller for Dsuta {
    fn step(&mut self, x: &FeatureSequence) -> Result<StepOutcome> {
        self.t += 1;
        let t = self.t;

        // Fast adaptation from the meta-parameters; phi_t itself is untouched.
        let mut phi_hat = self.phi_t.snapshot();
        let mut fast = Optimizer::new(self.cfg.fast)?;
        let (prediction, trace) = adapt_and_predict(&mut phi_hat, x, &self.cfg, &mut fast, &mut self.counters, t)?;

        // LII reading on every sample: against the frozen domain model once it
        // exists, otherwise against the current meta-parameters.
        let (lii_reading, buffered_lii) = match &self.policy {
            ResetPolicy::Dynamic(det) => {
                let reference = det.phi_d().unwrap_or(&self.phi_t);
                let v = lii(reference, &self.phi_pre, x, self.cfg.alpha, self.cfg.temperature)?;
                self.counters.record_lii();
                (Some(v), det.phi_d().map(|_| v))
            }
            _ => (None, None),
        };
        self.buffer.push(Buffered { x: x.clone(), lii: buffered_lii });

        let window_due = t.is_multiple_of(self.cfg.buffer_size as u64);
        let phi_before = match &self.policy {
            ResetPolicy::Dynamic(det) if t == det.last_reset() + det.k() as u64 => Some(self.phi_t.snapshot()),
            _ => None,
        };

        let mut event = None;
        let reset = match &mut self.policy {
            ResetPolicy::None => false,
            ResetPolicy::Fixed(freq) => fixed_reset_step(*freq, t).is_reset(),
            ResetPolicy::Oracle(bounds) => oracle_reset_step(bounds, t).is_reset(),
            ResetPolicy::Dynamic(det) if window_due => {
                let liis: Vec<Option<f64>> = self.buffer.iter().map(|b| b.lii).collect();
                event = det.check_window(t, &liis);
                event.is_some_and(|e| e.fired)
            }
            ResetPolicy::Dynamic(_) => false,
        };

        // A full buffer is always consumed by a meta-update; a reset then
        // discards its result.
        let mut meta_updated = false;
        if window_due {
            meta_updated = self.meta_update()?;
        }
        if reset {
            meta_updated = false;
            self.apply_reset(t)?;
        } else {
            if let ResetPolicy::Dynamic(det) = &mut self.policy {
                let phi_ref = phi_before.as_ref().unwrap_or(&self.phi_t);
                det.record(t, phi_ref, lii_reading.unwrap_or(0.0))?;
            }
        }

        Ok(StepOutcome {
            prediction,
            adapted_loss_trace: trace,
            meta_updated,
            reset_fired: reset,
            lii: lii_reading,
            detector_event: event,
        })
    }

    fn counters(&self) -> StepCounters {
        self.counters
    }

    fn position(&self) -> u64 {
        self.t
    }
}
