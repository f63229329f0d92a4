//! ECE before and after temperature scaling.

use std::fmt::Write as _;

use super::report::csv_f64;
use super::{write_file, Session};
use crate::error::{Error, Result};
use crate::metrics::{confidences, ece, fit_temperature, nll_at_temperature, CalibrationReport};
use crate::model::checkpoint::format_f64;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub loss_name: String,
    pub seed: u64,
    pub temperature: f64,
    /// Test-set ECE at `T = 1`.
    pub pre: CalibrationReport,
    /// Test-set ECE at the fitted temperature.
    pub post: CalibrationReport,
    pub nll_validation_pre: f64,
    pub nll_validation_post: f64,
    pub nll_test_pre: f64,
    pub nll_test_post: f64,
}

pub const CALIBRATION_CSV_HEADER: &str = "loss_name,seed,stage,ece,fitted_temperature,nll_validation,nll_test";
const BINS_HEADER: &str = "loss_name,seed,stage,bin_lower,bin_upper,count,confidence,accuracy";

impl Session {
    /// Fits a temperature on the ID validation logits of every configured
    /// (loss, seed) and reports test ECE with and without it. Writes
    /// `calibration.csv` and `calibration_bins.csv`. Diverged runs are
    /// skipped with a warning.
    pub fn run_calibration(&mut self) -> Result<Vec<CalibrationOutcome>> {
        if self.workbench.validation.is_none() {
            return Err(Error::Config(
                "calibration needs an ID validation split (n_val_per_class > 0 or a validation file)".into(),
            ));
        }
        let bins = self.config.metrics.ece_bins;
        let losses = self.config.losses.clone();
        let seeds = self.config.seeds.clone();
        let mut outcomes = Vec::new();
        for loss in &losses {
            for &seed in &seeds {
                let run = match self.trained(loss, seed) {
                    Ok(run) => run,
                    Err(Error::Diverged { .. }) => {
                        log::warn!("calibration skips diverged {} seed {seed}", loss.label());
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let wb = &self.workbench;
                let val = wb.validation.as_ref().expect("checked above");
                let val_logits = run.model.forward(&val.features)?;
                let test_logits = run.model.forward(&wb.test.features)?;
                let t = fit_temperature(&val_logits, &val.labels)?;

                let (conf, ok) = confidences(&test_logits, &wb.test.labels, 1.0)?;
                let pre = ece(&conf, &ok, bins)?;
                let (conf, ok) = confidences(&test_logits, &wb.test.labels, t)?;
                let mut post = ece(&conf, &ok, bins)?;
                post.fitted_temperature = Some(t);
                outcomes.push(CalibrationOutcome {
                    loss_name: loss.label(),
                    seed,
                    temperature: t,
                    pre,
                    post,
                    nll_validation_pre: nll_at_temperature(&val_logits, &val.labels, 1.0)?,
                    nll_validation_post: nll_at_temperature(&val_logits, &val.labels, t)?,
                    nll_test_pre: nll_at_temperature(&test_logits, &wb.test.labels, 1.0)?,
                    nll_test_post: nll_at_temperature(&test_logits, &wb.test.labels, t)?,
                });
            }
        }
        if outcomes.is_empty() {
            return Err(Error::Diverged { epoch: 0, step: 0 }.context("every calibration run diverged"));
        }

        let mut csv = format!("{CALIBRATION_CSV_HEADER}\n");
        let mut bins_csv = format!("{BINS_HEADER}\n");
        for o in &outcomes {
            for (stage, report, t, nll_v, nll_t) in [
                ("pre_ts", &o.pre, None, o.nll_validation_pre, o.nll_test_pre),
                ("post_ts", &o.post, Some(o.temperature), o.nll_validation_post, o.nll_test_post),
            ] {
                writeln!(
                    csv,
                    "{},{},{stage},{},{},{},{}",
                    o.loss_name,
                    o.seed,
                    format_f64(report.ece),
                    csv_f64(t),
                    format_f64(nll_v),
                    format_f64(nll_t)
                )
                .unwrap();
                for b in &report.bins {
                    writeln!(
                        bins_csv,
                        "{},{},{stage},{},{},{},{},{}",
                        o.loss_name,
                        o.seed,
                        format_f64(b.lower),
                        format_f64(b.upper),
                        b.count,
                        format_f64(b.confidence),
                        format_f64(b.accuracy)
                    )
                    .unwrap();
                }
            }
        }
        write_file(&self.out_dir.join("calibration.csv"), &csv)?;
        write_file(&self.out_dir.join("calibration_bins.csv"), &bins_csv)?;
        Ok(outcomes)
    }
}
