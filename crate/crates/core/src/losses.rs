//! Training objectives: cross-entropy, LogitNorm and LogitPenalty.
//!
//! Each loss exists twice: as a tape builder used for training, and as a
//! plain per-sample evaluator used for reporting and as an independent check
//! of the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, logsumexp, GradTape, Matrix, Targets, Var};

pub const DEFAULT_TAU: f64 = 0.04;
pub const DEFAULT_LAMBDA: f64 = 0.05;
pub const DEFAULT_STABILITY_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    LogitNorm,
    LogitPenalty,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::LogitNorm => "logit_norm",
            LossKind::LogitPenalty => "logit_penalty",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Logit temperature, LogitNorm only.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Norm penalty weight, LogitPenalty only.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Added to the logit norm before dividing.
    #[serde(default = "default_eps")]
    pub stability_eps: f64,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_eps() -> f64 {
    DEFAULT_STABILITY_EPS
}

impl LossConfig {
    pub fn cross_entropy() -> Self {
        LossConfig {
            kind: LossKind::CrossEntropy,
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
            stability_eps: DEFAULT_STABILITY_EPS,
        }
    }

    pub fn logit_norm(tau: f64) -> Self {
        LossConfig {
            kind: LossKind::LogitNorm,
            tau,
            ..Self::cross_entropy()
        }
    }

    pub fn logit_penalty(lambda: f64) -> Self {
        LossConfig {
            kind: LossKind::LogitPenalty,
            lambda,
            ..Self::cross_entropy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stability_eps > 0.0 && self.stability_eps.is_finite()) {
            return Err(Error::Config(format!("stability_eps must be > 0, got {}", self.stability_eps)));
        }
        match self.kind {
            LossKind::LogitNorm if !(self.tau > 0.0 && self.tau.is_finite()) => {
                Err(Error::Config(format!("tau must be > 0, got {}", self.tau)))
            }
            LossKind::LogitPenalty if !(self.lambda >= 0.0 && self.lambda.is_finite()) => {
                Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in file names and report rows, e.g. `logit_norm_tau0.04`.
    pub fn label(&self) -> String {
        match self.kind {
            LossKind::CrossEntropy => "cross_entropy".into(),
            LossKind::LogitNorm => format!("logit_norm_tau{}", self.tau),
            LossKind::LogitPenalty => format!("logit_penalty_lambda{}", self.lambda),
        }
    }

    /// Batch-mean loss recorded on the tape.
    pub fn build(&self, tape: &mut GradTape, logits: Var, labels: &[usize]) -> Result<Var> {
        self.validate()?;
        match self.kind {
            LossKind::CrossEntropy => cross_entropy(tape, logits, labels),
            LossKind::LogitNorm => logitnorm_loss(tape, logits, labels, self.tau, self.stability_eps),
            LossKind::LogitPenalty => logit_penalty_loss(tape, logits, labels, self.lambda),
        }
    }

    /// Loss of every row, computed directly rather than through the tape.
    pub fn per_sample(&self, logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
        self.validate()?;
        check_labels(logits, labels)?;
        Ok(logits
            .row_iter()
            .zip(labels)
            .map(|(row, &y)| match self.kind {
                LossKind::CrossEntropy => cross_entropy_row(row, y),
                LossKind::LogitNorm => logitnorm_row(row, y, self.tau, self.stability_eps),
                LossKind::LogitPenalty => cross_entropy_row(row, y) + self.lambda * l2_norm(row),
            })
            .collect())
    }
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("loss", format!("{} labels for {} rows", labels.len(), logits.rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Data(format!("label {bad} out of range for {} classes", logits.cols())));
    }
    Ok(())
}

/// `-log softmax(row)[y]`.
pub fn cross_entropy_row(row: &[f64], y: usize) -> f64 {
    logsumexp(row) - row[y]
}

/// Cross-entropy of `row / (tau * (||row|| + eps))`.
pub fn logitnorm_row(row: &[f64], y: usize, tau: f64, eps: f64) -> f64 {
    let denom = tau * (l2_norm(row) + eps);
    let scaled: Vec<f64> = row.iter().map(|v| v / denom).collect();
    cross_entropy_row(&scaled, y)
}

pub fn cross_entropy(tape: &mut GradTape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, Targets::Labels(labels.to_vec()))
}

/// The logits each row is normalised to before the cross-entropy:
/// `f / (tau * (||f|| + eps))`, differentiated through the norm.
pub fn normalized_logits(tape: &mut GradTape, logits: Var, tau: f64, eps: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let norm = tape.row_l2_norm(logits);
    let shifted = tape.add_scalar(norm, eps)?;
    let denom = tape.scale(shifted, tau)?;
    tape.div_by_column(logits, denom)
}

pub fn logitnorm_loss(tape: &mut GradTape, logits: Var, labels: &[usize], tau: f64, eps: f64) -> Result<Var> {
    let z = normalized_logits(tape, logits, tau, eps)?;
    cross_entropy(tape, z, labels)
}

pub fn logit_penalty_loss(tape: &mut GradTape, logits: Var, labels: &[usize], lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let ce = cross_entropy(tape, logits, labels)?;
    let norms = tape.row_l2_norm(logits);
    let mean_norm = tape.mean(norms)?;
    let penalty = tape.scale(mean_norm, lambda)?;
    tape.add(ce, penalty)
}

/// Smallest value the per-sample LogitNorm loss can take with `k` classes:
/// `log(1 + (k - 1) exp(-2 / tau))`.
pub fn logitnorm_lower_bound(k: usize, tau: f64) -> Result<f64> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {k}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    Ok(((k - 1) as f64 * (-2.0 / tau).exp()).ln_1p())
}
