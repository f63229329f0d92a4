//! Post-hoc OOD scores. Every score is oriented so that higher means "more
//! in-distribution".

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::checkpoint::format_f64;
use crate::model::MlpModel;
use crate::tensor::{argmax, logsumexp, softmax, Matrix, Targets};

pub const DEFAULT_ODIN_TEMPERATURE: f64 = 1000.0;
pub const DEFAULT_ODIN_EPSILON: f64 = 0.0014;
/// Energy temperature preset for LogitNorm-trained models.
pub const LOGIT_NORM_ENERGY_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Msp,
    Odin,
    Energy,
    GradNorm,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Msp => "msp",
            ScoreKind::Odin => "odin",
            ScoreKind::Energy => "energy",
            ScoreKind::GradNorm => "grad_norm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub kind: ScoreKind,
    #[serde(default = "default_odin_t")]
    pub odin_temperature: f64,
    #[serde(default = "default_odin_eps")]
    pub odin_epsilon: f64,
    #[serde(default = "one")]
    pub energy_temperature: f64,
    /// Energy temperature used instead of `energy_temperature` when the
    /// scored model was trained with LogitNorm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit_norm_energy_temperature: Option<f64>,
    #[serde(default = "one")]
    pub gradnorm_temperature: f64,
}

fn default_odin_t() -> f64 {
    DEFAULT_ODIN_TEMPERATURE
}
fn default_odin_eps() -> f64 {
    DEFAULT_ODIN_EPSILON
}
fn one() -> f64 {
    1.0
}

impl ScoreConfig {
    pub fn new(kind: ScoreKind) -> Self {
        ScoreConfig {
            kind,
            odin_temperature: DEFAULT_ODIN_TEMPERATURE,
            odin_epsilon: DEFAULT_ODIN_EPSILON,
            energy_temperature: 1.0,
            logit_norm_energy_temperature: None,
            gradnorm_temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let temps = [
            ("odin_temperature", self.odin_temperature),
            ("energy_temperature", self.energy_temperature),
            ("gradnorm_temperature", self.gradnorm_temperature),
            (
                "logit_norm_energy_temperature",
                self.logit_norm_energy_temperature.unwrap_or(1.0),
            ),
        ];
        for (name, t) in temps {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {t}")));
            }
        }
        if !(self.odin_epsilon >= 0.0 && self.odin_epsilon.is_finite()) {
            return Err(Error::Config(format!("odin_epsilon must be >= 0, got {}", self.odin_epsilon)));
        }
        Ok(())
    }

    /// The configuration to use for a model trained with `loss`.
    pub fn for_loss(&self, loss: LossKind) -> ScoreConfig {
        let mut out = *self;
        if loss == LossKind::LogitNorm {
            if let Some(t) = self.logit_norm_energy_temperature {
                out.energy_temperature = t;
            }
        }
        out
    }
}

/// Maximum softmax probability of one logit row.
pub fn msp_from_logits(logits: &[f64]) -> f64 {
    softmax(logits).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// `T * logsumexp(f / T)`, the negated free energy.
pub fn energy_from_logits(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    temperature * logsumexp(&scaled)
}

fn single_row(model: &MlpModel, x: &[f64]) -> Result<Matrix> {
    if x.len() != model.input_dim() {
        return Err(Error::shape(
            "score",
            format!("input has {} features, model expects {}", x.len(), model.input_dim()),
        ));
    }
    Matrix::row_vector(x)
}

pub fn msp_score(model: &MlpModel, x: &[f64]) -> Result<f64> {
    let logits = model.forward(&single_row(model, x)?)?;
    Ok(msp_from_logits(logits.row(0)))
}

pub fn energy_score(model: &MlpModel, x: &[f64], temperature: f64) -> Result<f64> {
    let logits = model.forward(&single_row(model, x)?)?;
    Ok(energy_from_logits(logits.row(0), temperature))
}

/// Temperature-scaled MSP after nudging `x` by `epsilon` in the direction
/// that raises the predicted class's tempered softmax.
pub fn odin_score(model: &MlpModel, x: &[f64], temperature: f64, epsilon: f64) -> Result<f64> {
    let input = single_row(model, x)?;
    let mut traced = model.forward_traced(&input, true)?;
    let predicted = argmax(traced.tape.value(traced.logits).row(0));
    let tempered = traced.tape.scale(traced.logits, 1.0 / temperature)?;
    // -log S_pred(x; T)
    let nll = traced
        .tape
        .softmax_cross_entropy(tempered, Targets::Labels(vec![predicted]))?;
    let grads = traced.tape.backward(nll)?;
    let grad = grads
        .get(traced.input)
        .ok_or_else(|| Error::Contract("input gradient was not recorded".into()))?;
    let perturbed: Vec<f64> = x
        .iter()
        .zip(grad.as_slice())
        .map(|(&xi, &g)| xi - epsilon * sign(g))
        .collect();
    let logits = model.forward(&Matrix::row_vector(&perturbed)?)?;
    let tempered: Vec<f64> = logits.row(0).iter().map(|v| v / temperature).collect();
    Ok(msp_from_logits(&tempered))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// L1 norm of the last-layer weight gradient of the cross-entropy between
/// `softmax(f / T)` and the uniform distribution.
pub fn gradnorm_score(model: &MlpModel, x: &[f64], temperature: f64) -> Result<f64> {
    let input = single_row(model, x)?;
    let mut traced = model.forward_traced(&input, false)?;
    let k = model.num_classes();
    let tempered = traced.tape.scale(traced.logits, 1.0 / temperature)?;
    let uniform = Matrix::filled(1, k, 1.0 / k as f64)?;
    let loss = traced.tape.softmax_cross_entropy(tempered, Targets::Soft(uniform))?;
    let grads = traced.tape.backward(loss)?;
    let last = *traced.weights.last().expect("model has at least one layer");
    let g = grads
        .get(last)
        .ok_or_else(|| Error::Contract("last-layer gradient was not recorded".into()))?;
    Ok(g.l1_norm())
}

pub fn score_one(model: &MlpModel, x: &[f64], config: &ScoreConfig) -> Result<f64> {
    match config.kind {
        ScoreKind::Msp => msp_score(model, x),
        ScoreKind::Odin => odin_score(model, x, config.odin_temperature, config.odin_epsilon),
        ScoreKind::Energy => energy_score(model, x, config.energy_temperature),
        ScoreKind::GradNorm => gradnorm_score(model, x, config.gradnorm_temperature),
    }
}

/// Scores every row of `features`.
pub fn score_batch(model: &MlpModel, features: &Matrix, config: &ScoreConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if model.num_classes() < 2 {
        return Err(Error::Config("scores need at least 2 classes".into()));
    }
    let scores: Vec<f64> = match config.kind {
        // Logit-only scores share one batched forward pass.
        ScoreKind::Msp => model.forward(features)?.row_iter().map(msp_from_logits).collect(),
        ScoreKind::Energy => model
            .forward(features)?
            .row_iter()
            .map(|r| energy_from_logits(r, config.energy_temperature))
            .collect(),
        ScoreKind::Odin | ScoreKind::GradNorm => features
            .row_iter()
            .map(|x| score_one(model, x, config))
            .collect::<Result<_>>()?,
    };
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "score_batch" });
    }
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Id,
    Ood,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Id => "ID",
            Origin::Ood => "OOD",
        })
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ID" => Ok(Origin::Id),
            "OOD" => Ok(Origin::Ood),
            other => Err(Error::Data(format!("unknown origin `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredExample {
    pub score: f64,
    pub origin: Origin,
}

pub fn label_scores(id: &[f64], ood: &[f64]) -> Vec<ScoredExample> {
    id.iter()
        .map(|&score| ScoredExample { score, origin: Origin::Id })
        .chain(ood.iter().map(|&score| ScoredExample {
            score,
            origin: Origin::Ood,
        }))
        .collect()
}

/// One `<origin>,<score>` record per line.
pub fn score_dump(scored: &[ScoredExample]) -> String {
    let mut out = String::new();
    for s in scored {
        writeln!(out, "{},{}", s.origin, format_f64(s.score)).unwrap();
    }
    out
}

pub fn parse_score_dump(text: &str) -> Result<Vec<ScoredExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (origin, score) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("line {}: expected `<origin>,<score>`", i + 1)))?;
        let origin: Origin = origin.parse().map_err(|e: Error| e.context(format!("line {}", i + 1)))?;
        let score: f64 = score
            .parse()
            .map_err(|_| Error::Data(format!("line {}: bad score `{score}`", i + 1)))?;
        if !score.is_finite() {
            return Err(Error::Data(format!("line {}: non-finite score", i + 1)));
        }
        out.push(ScoredExample { score, origin });
    }
    Ok(out)
}

pub fn read_score_dump(path: &Path) -> Result<Vec<ScoredExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_score_dump(&text).map_err(|e| e.context(path.display().to_string()))
}
