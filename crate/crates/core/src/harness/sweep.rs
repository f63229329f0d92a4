//! Selecting tau for LogitNorm on a held-out Gaussian-noise OOD set.

use std::fmt::Write as _;

use super::config::validate_tau_grid;
use super::report::MeanStd;
use super::{write_file, Session};
use crate::error::{Error, Result};
use crate::losses::logitnorm_lower_bound;
use crate::metrics::fpr_at_tpr;
use crate::model::checkpoint::format_f64;
use crate::scores::{label_scores, score_batch, ScoreConfig, ScoreKind};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    /// MSP FPR at the target TPR against the validation OOD set, over seeds.
    pub validation_fpr: MeanStd,
    /// Mean final-epoch training loss.
    pub final_train_loss: f64,
    pub lower_bound: f64,
    pub seeds_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    /// One row per tau in grid order; taus where every seed diverged are
    /// omitted.
    pub rows: Vec<SweepRow>,
    pub selected_tau: f64,
}

impl SweepReport {
    pub fn row(&self, tau: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.tau == tau)
    }
}

pub const SWEEP_HEADER: &str =
    "tau,validation_fpr95_mean,validation_fpr95_std,final_train_loss_mean,loss_lower_bound,seeds_used";

impl Session {
    /// Trains one LogitNorm model per (tau, seed), scores the ID hold-out
    /// (the test set when no hold-out exists) and the validation OOD set
    /// with MSP, and picks the tau with the lowest mean FPR; ties go to
    /// the smaller tau. Writes `sweep_tau.csv` and `selected_tau.txt`.
    pub fn sweep_tau(&mut self, tau_grid: &[f64]) -> Result<SweepReport> {
        validate_tau_grid(tau_grid)?;
        let template = self.config.logit_norm_template();
        let seeds = self.config.seeds.clone();
        let k = self.workbench.train.k;
        let msp = ScoreConfig::new(ScoreKind::Msp);
        if self.workbench.validation.is_none() {
            log::warn!("no ID validation split; tau sweep scores the ID test set");
        }

        let mut rows = Vec::new();
        for &tau in tau_grid {
            let mut loss = template;
            loss.tau = tau;
            let mut fprs = Vec::new();
            let mut final_losses = Vec::new();
            for &seed in &seeds {
                let run = match self.trained(&loss, seed) {
                    Ok(run) => run,
                    Err(Error::Diverged { .. }) => continue,
                    Err(e) => return Err(e.context(format!("tau sweep, tau {tau}"))),
                };
                let wb = &self.workbench;
                let id_set = wb.validation.as_ref().unwrap_or(&wb.test);
                let id = score_batch(&run.model, &id_set.features, &msp)?;
                let ood = score_batch(&run.model, &wb.validation_ood.features, &msp)?;
                fprs.push(fpr_at_tpr(&label_scores(&id, &ood), self.config.metrics.tpr_target)?);
                final_losses.push(run.telemetry.last().map(|t| t.train_loss).unwrap_or(f64::NAN));
            }
            let Some(validation_fpr) = MeanStd::of(&fprs) else {
                log::warn!("tau {tau}: every seed diverged");
                continue;
            };
            rows.push(SweepRow {
                tau,
                validation_fpr,
                final_train_loss: MeanStd::of(&final_losses).map(|m| m.mean).unwrap_or(f64::NAN),
                lower_bound: logitnorm_lower_bound(k, tau)?,
                seeds_used: fprs.len(),
            });
        }

        let selected = rows
            .iter()
            .min_by(|a, b| {
                a.validation_fpr
                    .mean
                    .total_cmp(&b.validation_fpr.mean)
                    .then(a.tau.total_cmp(&b.tau))
            })
            .map(|r| r.tau)
            .ok_or_else(|| Error::Diverged { epoch: 0, step: 0 }.context("every tau sweep run diverged"))?;

        let mut csv = format!("{SWEEP_HEADER}\n");
        for r in &rows {
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                format_f64(r.tau),
                format_f64(r.validation_fpr.mean),
                format_f64(r.validation_fpr.std),
                format_f64(r.final_train_loss),
                format_f64(r.lower_bound),
                r.seeds_used
            )
            .unwrap();
        }
        write_file(&self.out_dir.join("sweep_tau.csv"), &csv)?;
        write_file(&self.out_dir.join("selected_tau.txt"), &format!("{}\n", format_f64(selected)))?;
        Ok(SweepReport {
            rows,
            selected_tau: selected,
        })
    }
}
