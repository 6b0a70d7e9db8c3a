//! Model reset strategies.
//!
//! The dynamic strategy alternates between two stages after every reset at
//! step `r`:
//!
//! * construction, `r < t <= r + K`: the meta-parameters at `t = r + k`
//!   (`k = K / 2`) are frozen as the domain model, and the loss improvement
//!   index (LII) of every sample in `(r + k, r + K]` is collected. At
//!   `t = r + K` a Gaussian is fitted to the collected values.
//! * detection, `t > r + K`: every `M` steps the buffered LIIs are averaged
//!   and z-scored against the Gaussian. `P` consecutive windows with `z > 2`
//!   trigger a reset to the source parameters.
//!
//! Fixed-frequency and oracle-boundary strategies are provided as baselines.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtaError};
use crate::model::{FeatureSequence, ParamSet};
use crate::objective::suta_loss;

/// Right-tail threshold on the window z-score. Equality does not trigger.
pub const Z_THRESHOLD: f64 = 2.0;

/// Lower bound applied to fitted standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Loss improvement index: `L(domain, x) - L(source, x)`.
pub fn lii(phi_d: &ParamSet, phi_pre: &ParamSet, x: &FeatureSequence, alpha: f64, temperature: f64) -> Result<f64> {
    let domain = suta_loss(phi_d, x, alpha, temperature)?.total;
    let source = suta_loss(phi_pre, x, alpha, temperature)?.total;
    Ok(domain - source)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mu: f64,
    pub sigma: f64,
    pub n_samples: usize,
}

/// Sample mean and (n - 1) standard deviation, sigma floored at [`SIGMA_FLOOR`].
pub fn fit_gaussian(values: &[f64]) -> Result<GaussianStats> {
    if values.len() < 2 {
        return Err(TtaError::Config(format!(
            "need at least 2 values to fit LII statistics, got {} (construction length too small)",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0);
    Ok(GaussianStats { mu, sigma: var.sqrt().max(SIGMA_FLOOR), n_samples: values.len() })
}

/// z-score of the window mean: `(mean - mu) * sqrt(M) / sigma`.
pub fn shift_z(liis: &[f64], stats: &GaussianStats) -> f64 {
    let m = liis.len() as f64;
    let mean = liis.iter().sum::<f64>() / m;
    (mean - stats.mu) * m.sqrt() / stats.sigma
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetDecision {
    Continue,
    Reset,
}

impl ResetDecision {
    pub fn is_reset(self) -> bool {
        self == ResetDecision::Reset
    }
}

pub fn fixed_reset_step(freq: u64, t: u64) -> ResetDecision {
    if freq > 0 && t.is_multiple_of(freq) {
        ResetDecision::Reset
    } else {
        ResetDecision::Continue
    }
}

pub fn oracle_reset_step(boundaries: &BTreeSet<u64>, t: u64) -> ResetDecision {
    if boundaries.contains(&t) {
        ResetDecision::Reset
    } else {
        ResetDecision::Continue
    }
}

/// Reset strategy as written in run configs. Oracle boundaries come from
/// the stream at run time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ResetConfig {
    #[default]
    None,
    Fixed {
        freq: u64,
    },
    Oracle,
    Dynamic {
        construction: usize,
        patience: usize,
    },
}

impl ResetConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ResetConfig::Fixed { freq: 0 } => Err(TtaError::Config("fixed reset frequency must be >= 1".into())),
            ResetConfig::Dynamic { construction, patience } => {
                if construction - construction / 2 < 2 {
                    return Err(TtaError::Config(format!(
                        "construction length {construction} leaves fewer than 2 LII samples"
                    )));
                }
                if patience == 0 {
                    return Err(TtaError::Config("patience must be >= 1".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ResetConfig::None => "none".into(),
            ResetConfig::Fixed { freq } => format!("fixed-{freq}"),
            ResetConfig::Oracle => "oracle".into(),
            ResetConfig::Dynamic { construction, patience } => {
                format!("dynamic-K{construction}-P{patience}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Construction,
    Detection,
}

/// One z-test evaluation on a full buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorEvent {
    pub t: u64,
    pub z: f64,
    pub patience_counter: usize,
    pub fired: bool,
}

/// State of the dynamic reset controller.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    construction: usize,
    patience: usize,
    k: usize,
    last_reset: u64,
    phase: Phase,
    patience_counter: usize,
    phi_d: Option<ParamSet>,
    collected: Vec<f64>,
    stats: Option<GaussianStats>,
}

impl DetectorState {
    pub fn new(construction: usize, patience: usize) -> Result<Self> {
        ResetConfig::Dynamic { construction, patience }.validate()?;
        Ok(Self {
            construction,
            patience,
            k: construction / 2,
            last_reset: 0,
            phase: Phase::Construction,
            patience_counter: 0,
            phi_d: None,
            collected: Vec::new(),
            stats: None,
        })
    }

    pub fn construction(&self) -> usize {
        self.construction
    }

    pub fn patience(&self) -> usize {
        self.patience
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn last_reset(&self) -> u64 {
        self.last_reset
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn patience_counter(&self) -> usize {
        self.patience_counter
    }

    pub fn phi_d(&self) -> Option<&ParamSet> {
        self.phi_d.as_ref()
    }

    pub fn collected_liis(&self) -> &[f64] {
        &self.collected
    }

    pub fn stats(&self) -> Option<&GaussianStats> {
        self.stats.as_ref()
    }

    /// True while `t` is inside the no-reset window `t <= r + K`.
    pub fn in_guard(&self, t: u64) -> bool {
        t <= self.last_reset + self.construction as u64
    }

    /// Runs the z-test on a full buffer. Returns `None` when the window is
    /// not eligible (construction stage, or LIIs not all measured against
    /// the frozen domain model).
    pub fn check_window(&mut self, t: u64, liis: &[Option<f64>]) -> Option<DetectorEvent> {
        if self.in_guard(t) {
            return None;
        }
        let stats = self.stats?;
        let values: Option<Vec<f64>> = liis.iter().copied().collect();
        let values = values?;
        if values.is_empty() {
            return None;
        }
        let z = shift_z(&values, &stats);
        if z > Z_THRESHOLD {
            self.patience_counter += 1;
        } else {
            self.patience_counter = 0;
        }
        Some(DetectorEvent {
            t,
            z,
            patience_counter: self.patience_counter,
            fired: self.patience_counter >= self.patience,
        })
    }

    /// Bookkeeping after step `t` when no reset fired. `phi_t` is the
    /// meta-parameter set the step started from; `lii_t` is the sample's LII
    /// (meaningful once the domain model exists).
    pub fn record(&mut self, t: u64, phi_t: &ParamSet, lii_t: f64) -> Result<()> {
        let r = self.last_reset;
        let (k, big_k) = (self.k as u64, self.construction as u64);
        if t == r + k {
            self.phi_d = Some(phi_t.snapshot());
        } else if t > r + k && t <= r + big_k {
            self.collected.push(lii_t);
        }
        if t == r + big_k {
            self.stats = Some(fit_gaussian(&self.collected)?);
            self.phase = Phase::Detection;
        }
        Ok(())
    }

    /// Start a new construction stage at step `t`.
    pub fn reset(&mut self, t: u64) {
        self.last_reset = t;
        self.phase = Phase::Construction;
        self.patience_counter = 0;
        self.phi_d = None;
        self.collected.clear();
        self.stats = None;
    }
}
