//! Declarative experiment configuration, read from TOML. Unknown keys are
//! rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::metrics::{DEFAULT_ECE_BINS, DEFAULT_TPR_TARGET};
use crate::optim::OptimConfig;
use crate::scores::{ScoreConfig, ScoreKind, LOGIT_NORM_ENERGY_TEMPERATURE};

/// Where the in-distribution data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Blobs {
        k: usize,
        d: usize,
        #[serde(default = "default_train_per_class")]
        n_train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        n_test_per_class: usize,
        /// Held out for temperature fitting and tau selection; 0 disables.
        #[serde(default = "default_val_per_class")]
        n_val_per_class: usize,
        cluster_spread: f64,
        cluster_radius: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Comma-separated files with a trailing label column.
    Files {
        k: usize,
        train: PathBuf,
        test: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        validation: Option<PathBuf>,
    },
}

fn default_train_per_class() -> usize {
    500
}
fn default_test_per_class() -> usize {
    200
}
fn default_val_per_class() -> usize {
    100
}

impl DataConfig {
    pub fn k(&self) -> usize {
        match self {
            DataConfig::Blobs { k, .. } | DataConfig::Files { k, .. } => *k,
        }
    }
}

/// One OOD set. Parameters left out are resolved against the ID training
/// data (see [`crate::harness::Workbench`]).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodEntry {
    /// `uniform_box`, `gaussian_noise`, `ring`, `shifted_blobs` or `file`.
    pub kind: String,
    /// Dataset tag used in reports; defaults to `kind`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thickness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl OodEntry {
    pub fn of_kind(kind: &str) -> Self {
        OodEntry {
            kind: kind.to_string(),
            ..OodEntry::default()
        }
    }

    pub fn tag(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.kind)
    }

    pub fn validate(&self) -> Result<()> {
        let allowed: &[&str] = match self.kind.as_str() {
            "uniform_box" => &["half_width"],
            "gaussian_noise" => &["mean", "std"],
            "ring" => &["radius", "thickness"],
            "shifted_blobs" => &["shift", "spread"],
            "file" => &["path"],
            other => {
                return Err(Error::Config(format!("unknown OOD kind `{other}`")));
            }
        };
        let present = [
            ("half_width", self.half_width.is_some()),
            ("mean", self.mean.is_some()),
            ("std", self.std.is_some()),
            ("radius", self.radius.is_some()),
            ("thickness", self.thickness.is_some()),
            ("shift", self.shift.is_some()),
            ("spread", self.spread.is_some()),
            ("path", self.path.is_some()),
        ];
        for (field, set) in present {
            if set && !allowed.contains(&field) {
                return Err(Error::Config(format!(
                    "OOD field `{field}` does not apply to kind `{}`",
                    self.kind
                )));
            }
        }
        if self.kind == "file" && self.path.is_none() {
            return Err(Error::Config("OOD kind `file` needs a `path`".into()));
        }
        let tag = self.tag();
        if tag.is_empty() || !tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::Config(format!("OOD name `{tag}` must be non-empty [A-Za-z0-9_-]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    /// Samples per generated OOD set.
    #[serde(default = "default_ood_count")]
    pub count: usize,
    /// Base seed; set `i` of the panel uses `seed + i`.
    #[serde(default = "default_ood_seed")]
    pub seed: u64,
    #[serde(default = "default_panel")]
    pub panel: Vec<OodEntry>,
    /// Held-out OOD set used only for tau selection.
    #[serde(default = "default_validation_ood")]
    pub validation: OodEntry,
}

fn default_ood_count() -> usize {
    2000
}
fn default_ood_seed() -> u64 {
    1
}
fn default_panel() -> Vec<OodEntry> {
    ["uniform_box", "gaussian_noise", "ring", "shifted_blobs"]
        .into_iter()
        .map(OodEntry::of_kind)
        .collect()
}
fn default_validation_ood() -> OodEntry {
    OodEntry::of_kind("gaussian_noise")
}

impl Default for OodConfig {
    fn default() -> Self {
        OodConfig {
            count: default_ood_count(),
            seed: default_ood_seed(),
            panel: default_panel(),
            validation: default_validation_ood(),
        }
    }
}

/// Seed offset separating the validation OOD set from the panel.
pub const VALIDATION_OOD_SEED_OFFSET: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "default_tpr")]
    pub tpr_target: f64,
    #[serde(default = "default_bins")]
    pub ece_bins: usize,
    /// Also report AUPR with OOD as the positive class.
    #[serde(default)]
    pub aupr_out: bool,
    /// Histogram resolution for score-distribution data.
    #[serde(default = "default_hist_bins")]
    pub hist_bins: usize,
}

fn default_tpr() -> f64 {
    DEFAULT_TPR_TARGET
}
fn default_bins() -> usize {
    DEFAULT_ECE_BINS
}
fn default_hist_bins() -> usize {
    50
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            tpr_target: DEFAULT_TPR_TARGET,
            ece_bins: DEFAULT_ECE_BINS,
            aupr_out: false,
            hist_bins: default_hist_bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_tau_grid")]
    pub tau_grid: Vec<f64>,
}

/// The tau range searched for CIFAR-10.
pub fn default_tau_grid() -> Vec<f64> {
    vec![0.001, 0.005, 0.01, 0.02, 0.03, 0.04, 0.05]
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            tau_grid: default_tau_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Full layer widths including input and class count; defaults to
    /// `(d, 64, 64, k)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_dims: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_losses")]
    pub losses: Vec<LossConfig>,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_scores")]
    pub scores: Vec<ScoreConfig>,
    #[serde(default)]
    pub ood: OodConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_losses() -> Vec<LossConfig> {
    vec![LossConfig::cross_entropy(), LossConfig::logit_norm(crate::losses::DEFAULT_TAU)]
}

/// MSP, ODIN, Energy (with the LogitNorm temperature preset) and GradNorm.
pub fn default_scores() -> Vec<ScoreConfig> {
    [ScoreKind::Msp, ScoreKind::Odin, ScoreKind::Energy, ScoreKind::GradNorm]
        .into_iter()
        .map(|kind| {
            let mut s = ScoreConfig::new(kind);
            if kind == ScoreKind::Energy {
                s.logit_norm_energy_temperature = Some(LOGIT_NORM_ENERGY_TEMPERATURE);
            }
            s
        })
        .collect()
}

impl ExperimentConfig {
    /// The desk benchmark: 10 Gaussian blobs in 16 dimensions, CE versus
    /// LogitNorm, all four scores, the four-set OOD panel, five seeds.
    pub fn desk_suite() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: default_output_dir(),
            data: DataConfig::Blobs {
                k: 10,
                d: 16,
                n_train_per_class: 500,
                n_test_per_class: 200,
                n_val_per_class: 100,
                cluster_spread: DESK_CLUSTER_SPREAD,
                cluster_radius: DESK_CLUSTER_RADIUS,
                seed: 0,
            },
            model: ModelConfig::default(),
            losses: default_losses(),
            optim: OptimConfig::default(),
            scores: default_scores(),
            ood: OodConfig::default(),
            metrics: MetricsConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    pub fn layer_dims(&self, d: usize) -> Vec<usize> {
        self.model
            .layer_dims
            .clone()
            .unwrap_or_else(|| vec![d, 64, 64, self.data.k()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        match &self.data {
            DataConfig::Blobs {
                k,
                d,
                n_train_per_class,
                n_test_per_class,
                cluster_spread,
                cluster_radius,
                ..
            } => {
                crate::data::BlobSpec {
                    k: *k,
                    d: *d,
                    n_per_class: 1,
                    cluster_spread: *cluster_spread,
                    cluster_radius: *cluster_radius,
                }
                .validate()?;
                if *n_train_per_class < 1 || *n_test_per_class < 1 {
                    return Err(Error::Config("blobs need train and test samples in every class".into()));
                }
                if let Some(dims) = &self.model.layer_dims {
                    if dims.first() != Some(d) {
                        return Err(Error::Config(format!(
                            "model input width {:?} does not match data d = {d}",
                            dims.first()
                        )));
                    }
                }
            }
            DataConfig::Files { k, .. } => {
                if *k < 2 {
                    return Err(Error::Config("file data needs k >= 2".into()));
                }
            }
        }
        if let Some(dims) = &self.model.layer_dims {
            if dims.len() < 2 || dims.contains(&0) {
                return Err(Error::Config(format!("bad layer_dims {dims:?}")));
            }
            if dims.last() != Some(&self.data.k()) {
                return Err(Error::Config(format!(
                    "model output width {:?} does not match k = {}",
                    dims.last(),
                    self.data.k()
                )));
            }
        }
        if self.losses.is_empty() {
            return Err(Error::Config("at least one loss is required".into()));
        }
        let mut labels: Vec<String> = self.losses.iter().map(LossConfig::label).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.losses.len() {
            return Err(Error::Config("losses must be distinct".into()));
        }
        for loss in &self.losses {
            loss.validate()?;
        }
        self.optim.validate()?;
        if self.scores.is_empty() {
            return Err(Error::Config("at least one score is required".into()));
        }
        for s in &self.scores {
            s.validate()?;
        }
        let mut kinds: Vec<ScoreKind> = self.scores.iter().map(|s| s.kind).collect();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.scores.len() {
            return Err(Error::Config("each score kind may appear once".into()));
        }
        if self.ood.count == 0 {
            return Err(Error::Config("ood.count must be positive".into()));
        }
        if self.ood.panel.is_empty() {
            return Err(Error::Config("the OOD panel is empty".into()));
        }
        let mut tags = Vec::new();
        for entry in &self.ood.panel {
            entry.validate()?;
            tags.push(entry.tag().to_string());
        }
        tags.sort();
        tags.dedup();
        if tags.len() != self.ood.panel.len() {
            return Err(Error::Config("OOD panel names must be distinct".into()));
        }
        self.ood.validation.validate()?;
        let tpr = self.metrics.tpr_target;
        if !(tpr > 0.0 && tpr < 1.0) {
            return Err(Error::Config(format!("tpr_target must be in (0, 1), got {tpr}")));
        }
        if self.metrics.ece_bins == 0 {
            return Err(Error::Config("ece_bins must be >= 1".into()));
        }
        if self.metrics.hist_bins < 2 {
            return Err(Error::Config("hist_bins must be >= 2".into()));
        }
        validate_tau_grid(&self.sweep.tau_grid)?;
        Ok(())
    }

    /// The LogitNorm loss the tau sweep varies: the first configured one, or
    /// the default.
    pub fn logit_norm_template(&self) -> LossConfig {
        self.losses
            .iter()
            .copied()
            .find(|l| l.kind == LossKind::LogitNorm)
            .unwrap_or_else(|| LossConfig::logit_norm(crate::losses::DEFAULT_TAU))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e).context("reading config"))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// The canonical TOML echo written next to every output, and its
    /// SHA-256.
    pub fn echo(&self) -> Result<(String, String)> {
        let text = self.to_toml()?;
        let hash = hex::encode(Sha256::digest(text.as_bytes()));
        Ok((text, hash))
    }
}

pub fn validate_tau_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("tau grid is empty".into()));
    }
    if let Some(t) = grid.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Config(format!("tau values must be positive, got {t}")));
    }
    Ok(())
}

pub const DESK_CLUSTER_RADIUS: f64 = 4.0;
pub const DESK_CLUSTER_SPREAD: f64 = 0.8;
