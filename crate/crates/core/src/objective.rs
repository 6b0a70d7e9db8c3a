//! Unsupervised adaptation objective: entropy minimization plus minimum
//! class confusion over temperature-smoothed frame posteriors, with its
//! closed-form gradient for the linear classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtaError};
use crate::model::{forward, FeatureSequence, LogitMatrix, ParamSet};

pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_TEMPERATURE: f64 = 2.5;

/// Row-stochastic matrix of per-frame class probabilities, `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl ProbMatrix {
    /// Validates that every row is a distribution (sums to one within 1e-9).
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(TtaError::Dimension {
                what: "probability buffer length",
                expected: rows * cols,
                got: data.len(),
            });
        }
        for row in data.chunks_exact(cols) {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(TtaError::Config("probabilities must lie in [0, 1]".into()));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(TtaError::Config(format!("probability row sums to {s}")));
            }
        }
        Ok(Self { data, rows, cols })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TtaError::Config("ragged probability rows".into()));
        }
        Self::new(rows.concat(), rows.len(), cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Column `j` as a length-`rows` vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.iter_rows().map(|r| r[j]).collect()
    }
}

/// Components of the combined objective for a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub em: f64,
    pub mcc: f64,
    pub total: f64,
    pub alpha: f64,
    pub temperature: f64,
}

/// Gradient of the objective with respect to every entry of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(ParamSet);

impl GradientSet {
    /// Wrap raw values shaped like a parameter set.
    pub fn from_params(values: ParamSet) -> Self {
        GradientSet(values)
    }

    pub fn zeros_like(params: &ParamSet) -> Self {
        GradientSet(ParamSet::zeros(params.dim(), params.classes()))
    }

    pub fn weight(&self) -> &[f64] {
        self.0.weight()
    }

    pub fn bias(&self) -> &[f64] {
        self.0.bias()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.0.values()
    }

    pub fn as_params(&self) -> &ParamSet {
        &self.0
    }

    pub fn into_params(self) -> ParamSet {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }

    fn scale(&mut self, s: f64) {
        self.0.values_mut().for_each(|v| *v *= s);
    }

    fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.0.values_mut().zip(other.0.values()) {
            *a += b;
        }
    }
}

fn check_alpha_temperature(alpha: f64, temperature: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TtaError::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(TtaError::Config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

pub fn temperature_softmax(logits: &LogitMatrix, temperature: f64) -> Result<ProbMatrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(TtaError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let cols = logits.cols();
    let mut data = Vec::with_capacity(logits.rows() * cols);
    for row in logits.iter_rows() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut sum = 0.0;
        for &z in row {
            let e = ((z - max) / temperature).exp();
            sum += e;
            data.push(e);
        }
        data[start..].iter_mut().for_each(|p| *p /= sum);
    }
    Ok(ProbMatrix { data, rows: logits.rows(), cols })
}

// 0 log 0 := 0; NaN propagates.
fn plogp(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Mean per-frame Shannon entropy (nats).
pub fn entropy_loss(probs: &ProbMatrix) -> f64 {
    let total: f64 = probs.iter_rows().map(|r| -r.iter().map(|&p| plogp(p)).sum::<f64>()).sum();
    total / probs.rows() as f64
}

/// Sum over ordered class pairs `j != j'` of column dot products `P_j · P_j'`.
pub fn mcc_loss(probs: &ProbMatrix) -> f64 {
    // Per frame: sum_{j != j'} p_j p_j' = (sum_j p_j)^2 - sum_j p_j^2.
    probs
        .iter_rows()
        .map(|r| {
            let s: f64 = r.iter().sum();
            let sq: f64 = r.iter().map(|p| p * p).sum();
            let v = s * s - sq;
            if v < 0.0 {
                0.0
            } else {
                v
            }
        })
        .sum()
}

fn breakdown(probs: &ProbMatrix, alpha: f64, temperature: f64) -> LossBreakdown {
    let em = entropy_loss(probs);
    let mcc = mcc_loss(probs);
    LossBreakdown { em, mcc, total: alpha * em + (1.0 - alpha) * mcc, alpha, temperature }
}

pub fn suta_loss(params: &ParamSet, x: &FeatureSequence, alpha: f64, temperature: f64) -> Result<LossBreakdown> {
    suta_loss_from_logits(&forward(params, x)?, alpha, temperature)
}

/// Objective evaluated on precomputed logits.
pub fn suta_loss_from_logits(logits: &LogitMatrix, alpha: f64, temperature: f64) -> Result<LossBreakdown> {
    check_alpha_temperature(alpha, temperature)?;
    let probs = temperature_softmax(logits, temperature)?;
    Ok(breakdown(&probs, alpha, temperature))
}

pub fn suta_loss_grad(
    params: &ParamSet,
    x: &FeatureSequence,
    alpha: f64,
    temperature: f64,
) -> Result<(LossBreakdown, GradientSet)> {
    check_alpha_temperature(alpha, temperature)?;
    let probs = temperature_softmax(&forward(params, x)?, temperature)?;
    let loss = breakdown(&probs, alpha, temperature);

    let (l, c) = (probs.rows(), probs.cols());
    let inv_l = 1.0 / l as f64;
    let mut grad = GradientSet::zeros_like(params);
    let mut dp = vec![0.0; c];
    let mut dz = vec![0.0; c];
    for (i, row) in probs.iter_rows().enumerate() {
        let s: f64 = row.iter().sum();
        // d total / d p_ij
        for (g, &p) in dp.iter_mut().zip(row) {
            let d_em = if p > 0.0 { -inv_l * (p.ln() + 1.0) } else { 0.0 };
            let d_mcc = 2.0 * (s - p);
            *g = alpha * d_em + (1.0 - alpha) * d_mcc;
        }
        // Softmax Jacobian, then the 1/T from the logit scaling.
        let mean: f64 = row.iter().zip(&dp).map(|(p, g)| p * g).sum();
        for ((o, &p), &g) in dz.iter_mut().zip(row).zip(&dp) {
            *o = p * (g - mean) / temperature;
        }
        let frame = x.frame(i);
        let gw = grad.0.weight_mut();
        for (k, &xk) in frame.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            for (w, &d) in gw[k * c..(k + 1) * c].iter_mut().zip(&dz) {
                *w += xk * d;
            }
        }
        for (b, &d) in grad.0.bias_mut().iter_mut().zip(&dz) {
            *b += d;
        }
    }
    Ok((loss, grad))
}

/// Mean loss and mean gradient over a batch of samples.
pub fn batched_suta_loss_grad(
    params: &ParamSet,
    batch: &[FeatureSequence],
    alpha: f64,
    temperature: f64,
) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(TtaError::Usage("batched loss needs a nonempty batch".into()));
    }
    let mut total = 0.0;
    let mut grad = GradientSet::zeros_like(params);
    for x in batch {
        let (loss, g) = suta_loss_grad(params, x, alpha, temperature)?;
        total += loss.total;
        grad.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale(inv);
    Ok((total * inv, grad))
}
