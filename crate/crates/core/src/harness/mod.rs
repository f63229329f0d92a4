//! Experiment orchestration: data preparation, cached training runs, the
//! loss x score x OOD-set benchmark, the tau sweep and calibration reports.
//!
//! Everything a [`Session`] writes lands under the configured output
//! directory next to `config.toml` and `config.sha256`. Runs execute one
//! after another and every output is ordered by configuration order, so the
//! same configuration always produces the same bytes.

mod bench;
mod calibration;
pub mod config;
mod report;
mod sweep;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub use bench::{BenchmarkRow, ExperimentReport, NormRow, RunStatus, SeedRow, BENCH_HEADER, ID_TAG, NORMS_HEADER, SEED_HEADER};
pub use calibration::{CalibrationOutcome, CALIBRATION_CSV_HEADER};
pub use config::{DataConfig, ExperimentConfig, OodEntry};
pub use report::{emit_histogram_data, histogram_csv, mode_bin, HistBin, MeanStd, HISTOGRAM_HEADER};
pub use sweep::{SweepReport, SweepRow, SWEEP_HEADER};

use crate::data::{self, BlobSpec, LabeledDataset, Loaded, OodDataset, OodSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{checkpoint, MlpModel};
use crate::optim::{self, EpochTelemetry};

/// Datasets resolved from a configuration.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// ID hold-out for temperature fitting and tau selection.
    pub validation: Option<LabeledDataset>,
    /// The OOD panel, tagged with the entry names.
    pub panel: Vec<OodDataset>,
    pub validation_ood: OodDataset,
    /// Fully resolved generator parameters per panel entry (`None` for files).
    pub panel_specs: Vec<Option<OodSpec>>,
    pub layer_dims: Vec<usize>,
}

impl Workbench {
    pub fn prepare(config: &ExperimentConfig) -> Result<Workbench> {
        config.validate()?;
        let (train, test, validation) = load_id(&config.data)?;
        let d = train.dim();
        for (name, set) in [("test", Some(&test)), ("validation", validation.as_ref())] {
            if let Some(set) = set {
                if set.dim() != d {
                    return Err(Error::Data(format!("{name} set has {} features, train has {d}", set.dim())));
                }
            }
        }
        let layer_dims = config.layer_dims(d);
        if layer_dims[0] != d {
            return Err(Error::Config(format!("model input width {} does not match data d = {d}", layer_dims[0])));
        }

        let mut panel = Vec::new();
        let mut panel_specs = Vec::new();
        for (i, entry) in config.ood.panel.iter().enumerate() {
            let seed = config.ood.seed.wrapping_add(i as u64);
            let (set, spec) = resolve_ood(entry, config, &train, seed)?;
            panel.push(set);
            panel_specs.push(spec);
        }
        let seed = config.ood.seed.wrapping_add(config::VALIDATION_OOD_SEED_OFFSET);
        let (validation_ood, _) = resolve_ood(&config.ood.validation, config, &train, seed)?;
        Ok(Workbench {
            train,
            test,
            validation,
            panel,
            validation_ood,
            panel_specs,
            layer_dims,
        })
    }
}

fn load_id(data: &DataConfig) -> Result<(LabeledDataset, LabeledDataset, Option<LabeledDataset>)> {
    match data {
        DataConfig::Blobs {
            k,
            d,
            n_train_per_class,
            n_test_per_class,
            n_val_per_class,
            cluster_spread,
            cluster_radius,
            seed,
        } => {
            let total = n_train_per_class + n_test_per_class + n_val_per_class;
            let all = data::gen_blobs(
                &BlobSpec {
                    k: *k,
                    d: *d,
                    n_per_class: total,
                    cluster_spread: *cluster_spread,
                    cluster_radius: *cluster_radius,
                },
                *seed,
            )?;
            let (train, rest) = data::split(&all, *n_train_per_class as f64 / total as f64, *seed)?;
            if *n_val_per_class == 0 {
                return Ok((train, rest, None));
            }
            let held_out = n_val_per_class + n_test_per_class;
            let (validation, test) = data::split(&rest, *n_val_per_class as f64 / held_out as f64, *seed)?;
            Ok((train, test, Some(validation)))
        }
        DataConfig::Files {
            k,
            train,
            test,
            validation,
        } => {
            let load = |path: &Path| -> Result<LabeledDataset> {
                match data::load_delimited(path, true, Some(*k))? {
                    Loaded::Labeled(ds) => Ok(ds),
                    Loaded::Unlabeled(_) => Err(Error::Data(format!("{} has no labels", path.display()))),
                }
            };
            let validation = validation.as_deref().map(load).transpose()?;
            Ok((load(train)?, load(test)?, validation))
        }
    }
}

/// Fills in unspecified OOD parameters from the ID training data and
/// generates (or loads) the set.
fn resolve_ood(
    entry: &OodEntry,
    config: &ExperimentConfig,
    train: &LabeledDataset,
    seed: u64,
) -> Result<(OodDataset, Option<OodSpec>)> {
    let d = train.dim();
    let spec = match entry.kind.as_str() {
        // The box encloses every training coordinate.
        "uniform_box" => OodSpec::UniformBox {
            half_width: entry.half_width.unwrap_or_else(|| train.max_abs_feature()),
        },
        "gaussian_noise" => OodSpec::GaussianNoise {
            mean: entry.mean.unwrap_or(0.0),
            std: entry.std.unwrap_or_else(|| train.feature_std()),
        },
        // Inner edge of the shell sits beyond the farthest training point.
        "ring" => {
            let radius = entry.radius.unwrap_or_else(|| RING_RADIUS_FACTOR * train.max_norm());
            OodSpec::Ring {
                radius,
                thickness: entry.thickness.unwrap_or(RING_THICKNESS_FACTOR * radius),
            }
        }
        "shifted_blobs" => match &config.data {
            DataConfig::Blobs {
                k,
                cluster_spread,
                cluster_radius,
                seed: means_seed,
                ..
            } => OodSpec::ShiftedBlobs {
                k: *k,
                radius: *cluster_radius,
                spread: entry.spread.unwrap_or(*cluster_spread),
                shift: entry.shift.unwrap_or(*cluster_radius),
                means_seed: *means_seed,
            },
            DataConfig::Files { .. } => {
                return Err(Error::Config("shifted_blobs needs blob ID data".into()));
            }
        },
        "file" => {
            let path = entry.path.as_deref().expect("validated");
            let set = match data::load_delimited(path, false, None)? {
                Loaded::Unlabeled(mut set) => {
                    set.origin_tag = entry.tag().to_string();
                    set
                }
                Loaded::Labeled(_) => unreachable!("loaded without labels"),
            };
            if set.dim() != d {
                return Err(Error::Data(format!(
                    "OOD set {} has {} features, ID data has {d}",
                    entry.tag(),
                    set.dim()
                )));
            }
            return Ok((set, None));
        }
        other => return Err(Error::Config(format!("unknown OOD kind `{other}`"))),
    };
    let mut set = data::gen_ood(&spec, d, config.ood.count, seed)?;
    set.origin_tag = entry.tag().to_string();
    Ok((set, Some(spec)))
}

pub const RING_RADIUS_FACTOR: f64 = 1.25;
pub const RING_THICKNESS_FACTOR: f64 = 0.2;

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub loss: LossConfig,
    pub seed: u64,
    pub model: MlpModel,
    pub telemetry: Vec<EpochTelemetry>,
}

type TrainOutcome = std::result::Result<Arc<TrainedModel>, (usize, usize)>;

/// Prepared data plus a cache of training runs keyed by (loss, seed).
pub struct Session {
    pub config: ExperimentConfig,
    pub workbench: Workbench,
    out_dir: PathBuf,
    config_hash: String,
    runs: BTreeMap<(String, u64), TrainOutcome>,
}

impl Session {
    /// Validates the config, prepares the data and writes the config echo.
    pub fn new(config: ExperimentConfig) -> Result<Session> {
        let workbench = Workbench::prepare(&config)?;
        let out_dir = config.output_dir.clone();
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let (text, hash) = config.echo()?;
        write_file(&out_dir.join("config.toml"), &text)?;
        write_file(&out_dir.join("config.sha256"), &format!("{hash}\n"))?;
        Ok(Session {
            config,
            workbench,
            out_dir,
            config_hash: hash,
            runs: BTreeMap::new(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Trains (or fetches) the model for `loss` and `seed`, writing its
    /// telemetry and checkpoint under `<out>/<loss label>/`. A diverged run
    /// comes back as `Error::Diverged`.
    pub fn trained(&mut self, loss: &LossConfig, seed: u64) -> Result<Arc<TrainedModel>> {
        let key = (loss.label(), seed);
        if let Some(outcome) = self.runs.get(&key) {
            return outcome.clone().map_err(|(epoch, step)| Error::Diverged { epoch, step });
        }
        let stage = format!("{} / seed {seed}", key.0);
        log::info!("training {stage}");
        let init = MlpModel::init(&self.workbench.layer_dims, seed).map_err(|e| e.context(stage.clone()))?;
        let mut optim = self.config.optim.clone();
        optim.seed = seed;
        let result = optim::train(
            &init,
            &self.workbench.train,
            loss,
            &optim,
            Some(&self.workbench.validation_ood),
        );
        let outcome: TrainOutcome = match result {
            Ok((model, telemetry)) => {
                let dir = self.out_dir.join(&key.0);
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_file(&dir.join(format!("telemetry_{seed}.csv")), &optim::telemetry_csv(&telemetry))?;
                checkpoint::save(&dir.join(format!("checkpoint_{seed}.txt")), &model, Some(&self.config_hash))?;
                Ok(Arc::new(TrainedModel {
                    loss: *loss,
                    seed,
                    model,
                    telemetry,
                }))
            }
            Err(Error::Diverged { epoch, step }) => {
                log::warn!("{stage} diverged at epoch {epoch}, step {step}");
                Err((epoch, step))
            }
            Err(e) => return Err(e.context(stage)),
        };
        self.runs.insert(key, outcome.clone());
        outcome.map_err(|(epoch, step)| Error::Diverged { epoch, step })
    }

    /// Trains every configured loss for every seed.
    pub fn train_all(&mut self) -> Result<Vec<std::result::Result<Arc<TrainedModel>, Error>>> {
        let losses = self.config.losses.clone();
        let seeds = self.config.seeds.clone();
        let mut out = Vec::new();
        for loss in &losses {
            for &seed in &seeds {
                match self.trained(loss, seed) {
                    Err(e) if !e.is_divergence() => return Err(e),
                    r => out.push(r),
                }
            }
        }
        if out.iter().all(|r| r.is_err()) {
            return Err(Error::Diverged { epoch: 0, step: 0 }.context("every training run diverged"));
        }
        Ok(out)
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs the benchmark grid for `config`.
pub fn run_experiment(config: ExperimentConfig) -> Result<ExperimentReport> {
    Session::new(config)?.run_experiment()
}

/// Trains one LogitNorm model per tau and seed and selects tau on the
/// validation OOD set.
pub fn sweep_tau(config: ExperimentConfig, tau_grid: &[f64]) -> Result<SweepReport> {
    Session::new(config)?.sweep_tau(tau_grid)
}

/// ECE before and after temperature scaling for every configured loss.
pub fn run_calibration(config: ExperimentConfig) -> Result<Vec<CalibrationOutcome>> {
    Session::new(config)?.run_calibration()
}
