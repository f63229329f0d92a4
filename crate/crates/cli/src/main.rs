//! `logitnorm`: train, score, evaluate and benchmark from a TOML config.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 every
//! training run diverged.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::LevelFilter;

use logitnorm::harness::{self, ExperimentConfig, Session};
use logitnorm::losses::LossKind;
use logitnorm::metrics::{detection_report, DETECTION_HEADER};
use logitnorm::model::checkpoint;
use logitnorm::scores::read_score_dump;
use logitnorm::Error;

#[derive(Parser)]
#[command(name = "logitnorm", version, about = "LogitNorm OOD-detection workbench")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or output file for `eval` and `report`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured loss for every seed; writes telemetry and checkpoints.
    Train,
    /// Score the ID test set and the OOD panel with a saved checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Loss the checkpoint was trained with (selects score presets).
        #[arg(long, value_enum, default_value = "cross-entropy")]
        loss: LossArg,
    },
    /// Detection metrics for a score dump.
    Eval {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        tpr: f64,
    },
    /// Full loss x score x OOD-set benchmark.
    Bench,
    /// Select tau for LogitNorm on the validation OOD set.
    SweepTau {
        /// Comma-separated tau values; defaults to the config's grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// ECE before and after temperature scaling.
    Calibrate,
    /// Histogram data for a score dump.
    Report {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    CrossEntropy,
    LogitNorm,
    LogitPenalty,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::CrossEntropy => LossKind::CrossEntropy,
            LossArg::LogitNorm => LossKind::LogitNorm,
            LossArg::LogitPenalty => LossKind::LogitPenalty,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Shape { .. } | Error::Contract(_) => 1,
        Error::Data(_) | Error::Io { .. } | Error::NonFinite { .. } => 2,
        Error::Diverged { .. } => 3,
        Error::Context { .. } => unreachable!("root() unwraps context"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet { LevelFilter::Error } else { LevelFilter::Info })
        .parse_env("LOGITNORM_LOG")
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --config <path>".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn emit(cli: &Cli, text: &str) {
    if !cli.quiet {
        let mut stdout = std::io::stdout().lock();
        let _ = stdout.write_all(text.as_bytes());
    }
}

fn write_or_print(cli: &Cli, text: &str) -> Result<(), Error> {
    match &cli.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        }),
        None => {
            emit(cli, text);
            Ok(())
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Train => {
            let mut session = Session::new(load_config(cli)?)?;
            let runs = session.train_all()?;
            for run in runs.iter().flatten() {
                let last = run.telemetry.last().expect("at least one epoch");
                emit(
                    cli,
                    &format!(
                        "{} seed {}: train_loss {:.6} train_acc {:.4} mean_logit_norm {:.4}\n",
                        run.loss.label(),
                        run.seed,
                        last.train_loss,
                        last.train_acc,
                        last.mean_logit_norm_id
                    ),
                );
            }
            emit(cli, &format!("outputs in {}\n", session.out_dir().display()));
        }
        Command::Score { checkpoint: path, loss } => {
            let session = Session::new(load_config(cli)?)?;
            let ck = checkpoint::load(path)?;
            let tag = stem(path);
            for p in session.score_model(&ck.model, (*loss).into(), &tag)? {
                emit(cli, &format!("{}\n", p.display()));
            }
        }
        Command::Eval { dump, tpr } => {
            let scored = read_score_dump(dump)?;
            let report = detection_report(&scored, *tpr)?;
            write_or_print(cli, &format!("{DETECTION_HEADER}\n{}\n", report.csv_row()))?;
        }
        Command::Bench => {
            let report = harness::run_experiment(load_config(cli)?)?;
            let mut text = String::from("loss score dataset fpr95 auroc aupr id_acc seeds\n");
            for r in &report.rows {
                text.push_str(&format!(
                    "{} {} {} {:.4} {:.4} {:.4} {:.4} {}\n",
                    r.loss_name,
                    r.score_name,
                    r.ood_dataset_tag,
                    r.fpr95.mean,
                    r.auroc.mean,
                    r.aupr.mean,
                    r.id_accuracy.mean,
                    r.seeds_used
                ));
            }
            text.push_str(&format!("config hash {}\n", report.config_hash));
            emit(cli, &text);
        }
        Command::SweepTau { grid } => {
            let config = load_config(cli)?;
            let grid = grid.clone().unwrap_or_else(|| config.sweep.tau_grid.clone());
            let report = harness::sweep_tau(config, &grid)?;
            let mut text = String::from("tau validation_fpr95 final_train_loss lower_bound\n");
            for r in &report.rows {
                text.push_str(&format!(
                    "{} {:.4} {:.6} {:.6}\n",
                    r.tau, r.validation_fpr.mean, r.final_train_loss, r.lower_bound
                ));
            }
            text.push_str(&format!("selected tau {}\n", report.selected_tau));
            emit(cli, &text);
        }
        Command::Calibrate => {
            let outcomes = harness::run_calibration(load_config(cli)?)?;
            let mut text = String::from("loss seed ece_pre ece_post T\n");
            for o in &outcomes {
                text.push_str(&format!(
                    "{} {} {:.5} {:.5} {:.5}\n",
                    o.loss_name, o.seed, o.pre.ece, o.post.ece, o.temperature
                ));
            }
            emit(cli, &text);
        }
        Command::Report { dump, bins } => {
            let scored = read_score_dump(dump)?;
            let hist = harness::emit_histogram_data(&scored, *bins)?;
            write_or_print(cli, &harness::histogram_csv(&hist))?;
        }
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into())
}
