//! The loss x score x OOD-set benchmark grid.

use std::fmt::Write as _;
use std::path::PathBuf;

use super::report::{csv_f64, emit_histogram_data, histogram_csv, MeanStd};
use super::{write_file, Session, TrainedModel};
use crate::error::{Error, Result};
use crate::metrics::{aupr_out, detection_report, DetectionReport};
use crate::losses::LossKind;
use crate::model::checkpoint::format_f64;
use crate::model::MlpModel;
use crate::optim::evaluate;
use crate::scores::{label_scores, score_batch, score_dump, ScoreKind};

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok,
    Diverged { epoch: usize, step: usize },
}

/// One (loss, score, dataset, seed) measurement, or a warning row for a
/// diverged (loss, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRow {
    pub loss_name: String,
    pub score_name: String,
    pub ood_dataset_tag: String,
    pub seed: u64,
    pub status: RunStatus,
    pub report: Option<DetectionReport>,
    pub aupr_out: Option<f64>,
    pub id_accuracy: Option<f64>,
}

/// Mean and spread over the seeds that trained successfully.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub loss_name: String,
    pub score_name: String,
    pub ood_dataset_tag: String,
    pub fpr95: MeanStd,
    pub auroc: MeanStd,
    pub aupr: MeanStd,
    pub id_accuracy: MeanStd,
    pub seeds_used: usize,
}

/// Mean logit norm of a trained model on the ID test set or an OOD set.
#[derive(Debug, Clone, PartialEq)]
pub struct NormRow {
    pub loss_name: String,
    pub seed: u64,
    pub dataset: String,
    pub mean_logit_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<BenchmarkRow>,
    pub seed_rows: Vec<SeedRow>,
    pub norms: Vec<NormRow>,
    pub config_hash: String,
}

impl ExperimentReport {
    pub fn row(&self, loss_name: &str, score: ScoreKind, dataset: &str) -> Option<&BenchmarkRow> {
        self.rows
            .iter()
            .find(|r| r.loss_name == loss_name && r.score_name == score.name() && r.ood_dataset_tag == dataset)
    }

    /// FPR95 averaged over every OOD set for one loss and score.
    pub fn panel_mean_fpr(&self, loss_name: &str, score: ScoreKind) -> Option<f64> {
        panel_mean(self, loss_name, score, |r| r.fpr95.mean)
    }

    pub fn panel_mean_auroc(&self, loss_name: &str, score: ScoreKind) -> Option<f64> {
        panel_mean(self, loss_name, score, |r| r.auroc.mean)
    }

    pub fn mean_norm(&self, loss_name: &str, dataset: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .norms
            .iter()
            .filter(|n| n.loss_name == loss_name && n.dataset == dataset)
            .map(|n| n.mean_logit_norm)
            .collect();
        MeanStd::of(&v).map(|m| m.mean)
    }
}

fn panel_mean(report: &ExperimentReport, loss: &str, score: ScoreKind, f: impl Fn(&BenchmarkRow) -> f64) -> Option<f64> {
    let v: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.loss_name == loss && r.score_name == score.name())
        .map(f)
        .collect();
    MeanStd::of(&v).map(|m| m.mean)
}

pub const BENCH_HEADER: &str = "loss_name,score_name,ood_dataset_tag,fpr95_mean,fpr95_std,auroc_mean,auroc_std,aupr_mean,aupr_std,id_accuracy_mean,id_accuracy_std,seeds_used";
pub const SEED_HEADER: &str = "loss_name,score_name,ood_dataset_tag,seed,status,fpr95,auroc,aupr,id_accuracy";
pub const NORMS_HEADER: &str = "loss_name,seed,dataset,mean_logit_norm";

/// Dataset tag of the ID test set in norm reports.
pub const ID_TAG: &str = "id_test";

impl Session {
    /// Trains every (loss, seed), scores ID test and every OOD set with
    /// every score, and writes `bench.csv`, `per_seed.csv`,
    /// `logit_norms.csv`, score dumps and MSP histograms.
    pub fn run_experiment(&mut self) -> Result<ExperimentReport> {
        let losses = self.config.losses.clone();
        let seeds = self.config.seeds.clone();
        let mut seed_rows = Vec::new();
        let mut norms = Vec::new();
        let mut any_ok = false;
        for loss in &losses {
            for &seed in &seeds {
                match self.trained(loss, seed) {
                    Ok(run) => {
                        any_ok = true;
                        let (rows, run_norms) = self
                            .evaluate_run(&run)
                            .map_err(|e| e.context(format!("{} / seed {seed} / scoring", loss.label())))?;
                        seed_rows.extend(rows);
                        norms.extend(run_norms);
                    }
                    Err(Error::Diverged { epoch, step }) => {
                        log::warn!("excluding {} seed {seed}: diverged", loss.label());
                        seed_rows.push(SeedRow {
                            loss_name: loss.label(),
                            score_name: "*".into(),
                            ood_dataset_tag: "*".into(),
                            seed,
                            status: RunStatus::Diverged { epoch, step },
                            report: None,
                            aupr_out: None,
                            id_accuracy: None,
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let rows = self.aggregate(&seed_rows);
        self.write_reports(&rows, &seed_rows, &norms)?;
        if !any_ok {
            return Err(Error::Diverged { epoch: 0, step: 0 }.context("every training run diverged"));
        }
        Ok(ExperimentReport {
            rows,
            seed_rows,
            norms,
            config_hash: self.config_hash.clone(),
        })
    }

    fn evaluate_run(&self, run: &TrainedModel) -> Result<(Vec<SeedRow>, Vec<NormRow>)> {
        let wb = &self.workbench;
        let label = run.loss.label();
        let (acc, id_norm) = evaluate(&run.model, &wb.test.features, Some(&wb.test.labels))?;
        let mut norms = vec![NormRow {
            loss_name: label.clone(),
            seed: run.seed,
            dataset: ID_TAG.into(),
            mean_logit_norm: id_norm,
        }];
        for set in &wb.panel {
            norms.push(NormRow {
                loss_name: label.clone(),
                seed: run.seed,
                dataset: set.origin_tag.clone(),
                mean_logit_norm: evaluate(&run.model, &set.features, None)?.1,
            });
        }

        let mut rows = Vec::new();
        for score in &self.config.scores {
            let resolved = score.for_loss(run.loss.kind);
            let id_scores = score_batch(&run.model, &wb.test.features, &resolved)?;
            for set in &wb.panel {
                let ood_scores = score_batch(&run.model, &set.features, &resolved)?;
                let scored = label_scores(&id_scores, &ood_scores);
                let stem = format!("{label}_{}_{}_{}", score.kind.name(), set.origin_tag, run.seed);
                write_file(&self.out_dir.join(format!("scores_{stem}.txt")), &score_dump(&scored))?;
                if score.kind == ScoreKind::Msp {
                    let hist = emit_histogram_data(&scored, self.config.metrics.hist_bins)?;
                    write_file(&self.out_dir.join(format!("hist_{stem}.csv")), &histogram_csv(&hist))?;
                }
                let report = detection_report(&scored, self.config.metrics.tpr_target)?;
                let out_pr = if self.config.metrics.aupr_out {
                    Some(aupr_out(&scored)?)
                } else {
                    None
                };
                rows.push(SeedRow {
                    loss_name: label.clone(),
                    score_name: score.kind.name().into(),
                    ood_dataset_tag: set.origin_tag.clone(),
                    seed: run.seed,
                    status: RunStatus::Ok,
                    report: Some(report),
                    aupr_out: out_pr,
                    id_accuracy: acc,
                });
            }
        }
        Ok((rows, norms))
    }

    /// Scores the ID test set and every OOD set with every configured score
    /// and writes one dump per (score, dataset) named
    /// `scores_<tag>_<score>_<dataset>.txt`. Returns the written paths.
    pub fn score_model(&self, model: &MlpModel, loss: LossKind, tag: &str) -> Result<Vec<PathBuf>> {
        let wb = &self.workbench;
        if model.input_dim() != wb.train.dim() || model.num_classes() != wb.train.k {
            return Err(Error::Data(format!(
                "checkpoint is {}->{}, data is d={} k={}",
                model.input_dim(),
                model.num_classes(),
                wb.train.dim(),
                wb.train.k
            )));
        }
        let mut written = Vec::new();
        for score in &self.config.scores {
            let resolved = score.for_loss(loss);
            let id_scores = score_batch(model, &wb.test.features, &resolved)?;
            for set in &wb.panel {
                let ood_scores = score_batch(model, &set.features, &resolved)?;
                let path = self
                    .out_dir
                    .join(format!("scores_{tag}_{}_{}.txt", score.kind.name(), set.origin_tag));
                write_file(&path, &score_dump(&label_scores(&id_scores, &ood_scores)))?;
                written.push(path);
            }
        }
        Ok(written)
    }

    /// Rows in canonical (loss, score, dataset) configuration order.
    fn aggregate(&self, seed_rows: &[SeedRow]) -> Vec<BenchmarkRow> {
        let mut rows = Vec::new();
        for loss in &self.config.losses {
            let loss_name = loss.label();
            for score in &self.config.scores {
                for set in &self.workbench.panel {
                    let ok: Vec<&SeedRow> = seed_rows
                        .iter()
                        .filter(|r| {
                            r.loss_name == loss_name
                                && r.score_name == score.kind.name()
                                && r.ood_dataset_tag == set.origin_tag
                                && r.status == RunStatus::Ok
                        })
                        .collect();
                    let pick = |f: fn(&SeedRow) -> f64| MeanStd::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
                    let (Some(fpr95), Some(auroc), Some(aupr), Some(id_accuracy)) = (
                        pick(|r| r.report.unwrap().fpr_at_tpr),
                        pick(|r| r.report.unwrap().auroc),
                        pick(|r| r.report.unwrap().aupr),
                        pick(|r| r.id_accuracy.unwrap_or(0.0)),
                    ) else {
                        continue;
                    };
                    rows.push(BenchmarkRow {
                        loss_name: loss_name.clone(),
                        score_name: score.kind.name().into(),
                        ood_dataset_tag: set.origin_tag.clone(),
                        fpr95,
                        auroc,
                        aupr,
                        id_accuracy,
                        seeds_used: ok.len(),
                    });
                }
            }
        }
        rows
    }

    fn write_reports(&self, rows: &[BenchmarkRow], seed_rows: &[SeedRow], norms: &[NormRow]) -> Result<()> {
        let mut bench = format!("{BENCH_HEADER}\n");
        for r in rows {
            writeln!(
                bench,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.loss_name,
                r.score_name,
                r.ood_dataset_tag,
                format_f64(r.fpr95.mean),
                format_f64(r.fpr95.std),
                format_f64(r.auroc.mean),
                format_f64(r.auroc.std),
                format_f64(r.aupr.mean),
                format_f64(r.aupr.std),
                format_f64(r.id_accuracy.mean),
                format_f64(r.id_accuracy.std),
                r.seeds_used
            )
            .unwrap();
        }
        write_file(&self.out_dir.join("bench.csv"), &bench)?;

        let with_out = self.config.metrics.aupr_out;
        let mut per_seed = String::from(SEED_HEADER);
        if with_out {
            per_seed.push_str(",aupr_out");
        }
        per_seed.push('\n');
        for r in seed_rows {
            let status = match r.status {
                RunStatus::Ok => "ok".to_string(),
                RunStatus::Diverged { epoch, step } => format!("diverged_epoch{epoch}_step{step}"),
            };
            write!(
                per_seed,
                "{},{},{},{},{},{},{},{},{}",
                r.loss_name,
                r.score_name,
                r.ood_dataset_tag,
                r.seed,
                status,
                csv_f64(r.report.map(|x| x.fpr_at_tpr)),
                csv_f64(r.report.map(|x| x.auroc)),
                csv_f64(r.report.map(|x| x.aupr)),
                csv_f64(r.id_accuracy)
            )
            .unwrap();
            if with_out {
                write!(per_seed, ",{}", csv_f64(r.aupr_out)).unwrap();
            }
            per_seed.push('\n');
        }
        write_file(&self.out_dir.join("per_seed.csv"), &per_seed)?;

        let mut norm_csv = format!("{NORMS_HEADER}\n");
        for n in norms {
            writeln!(norm_csv, "{},{},{},{}", n.loss_name, n.seed, n.dataset, format_f64(n.mean_logit_norm)).unwrap();
        }
        write_file(&self.out_dir.join("logit_norms.csv"), &norm_csv)
    }
}
