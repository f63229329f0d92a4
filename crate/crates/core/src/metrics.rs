//! Detection metrics (FPR at a TPR target, AUROC, AUPR) and calibration
//! metrics (binned ECE, temperature scaling). ID is always the positive class.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::losses::cross_entropy_row;
use crate::model::checkpoint::format_f64;
use crate::scores::{Origin, ScoredExample};
use crate::tensor::Matrix;

pub const DEFAULT_TPR_TARGET: f64 = 0.95;
pub const DEFAULT_ECE_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionReport {
    pub fpr_at_tpr: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

pub const DETECTION_HEADER: &str = "fpr_at_tpr,auroc,aupr,n_id,n_ood";

impl DetectionReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            format_f64(self.fpr_at_tpr),
            format_f64(self.auroc),
            format_f64(self.aupr),
            self.n_id,
            self.n_ood
        )
    }
}

/// ID and OOD scores split out of a labelled list, after validation.
fn partition(scored: &[ScoredExample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut id = Vec::new();
    let mut ood = Vec::new();
    for s in scored {
        if !s.score.is_finite() {
            return Err(Error::Data(format!("non-finite score {}", s.score)));
        }
        match s.origin {
            Origin::Id => id.push(s.score),
            Origin::Ood => ood.push(s.score),
        }
    }
    if id.is_empty() {
        return Err(Error::Data("no ID examples".into()));
    }
    if ood.is_empty() {
        return Err(Error::Data("no OOD examples".into()));
    }
    Ok((id, ood))
}

fn descending(a: &f64, b: &f64) -> Ordering {
    b.partial_cmp(a).expect("scores are finite")
}

/// Fraction of OOD examples accepted by the highest threshold that still
/// accepts at least `tpr_target` of the ID examples (`score >= threshold`).
pub fn fpr_at_tpr(scored: &[ScoredExample], tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::Config(format!("tpr_target must be in (0, 1], got {tpr_target}")));
    }
    let (mut id, ood) = partition(scored)?;
    id.sort_by(descending);
    let n = id.len();
    let needed = (1..=n)
        .find(|&c| c as f64 / n as f64 >= tpr_target)
        .unwrap_or(n);
    let threshold = id[needed - 1];
    let accepted = ood.iter().filter(|&&s| s >= threshold).count();
    Ok(accepted as f64 / ood.len() as f64)
}

/// Mann-Whitney AUROC with ties counted as half a win.
pub fn auroc(scored: &[ScoredExample]) -> Result<f64> {
    let (id, ood) = partition(scored)?;
    let mut all: Vec<(f64, Origin)> = id
        .iter()
        .map(|&s| (s, Origin::Id))
        .chain(ood.iter().map(|&s| (s, Origin::Ood)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are finite"));

    // Counted in half-pairs so ties stay integral.
    let mut half_credit: u128 = 0;
    let mut ood_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut id_here, mut ood_here) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            match all[j].1 {
                Origin::Id => id_here += 1,
                Origin::Ood => ood_here += 1,
            }
            j += 1;
        }
        half_credit += 2 * id_here * ood_below + id_here * ood_here;
        ood_below += ood_here;
        i = j;
    }
    let pairs = 2 * id.len() as u128 * ood.len() as u128;
    Ok(half_credit as f64 / pairs as f64)
}

/// Area under the precision-recall curve with ID as the positive class:
/// the step sum of precision times recall increment over distinct
/// thresholds, highest first.
pub fn aupr(scored: &[ScoredExample]) -> Result<f64> {
    let (id, ood) = partition(scored)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| descending(&a.0, &b.0));

    let n_id = id.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_id;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// AUPR with OOD as the positive class (scores negated).
pub fn aupr_out(scored: &[ScoredExample]) -> Result<f64> {
    let flipped: Vec<ScoredExample> = scored
        .iter()
        .map(|s| ScoredExample {
            score: -s.score,
            origin: match s.origin {
                Origin::Id => Origin::Ood,
                Origin::Ood => Origin::Id,
            },
        })
        .collect();
    aupr(&flipped)
}

pub fn detection_report(scored: &[ScoredExample], tpr_target: f64) -> Result<DetectionReport> {
    let (id, ood) = partition(scored)?;
    Ok(DetectionReport {
        fpr_at_tpr: fpr_at_tpr(scored, tpr_target)?,
        auroc: auroc(scored)?,
        aupr: aupr(scored)?,
        n_id: id.len(),
        n_ood: ood.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence in the bin, 0 when empty.
    pub confidence: f64,
    /// Accuracy in the bin, 0 when empty.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
    pub fitted_temperature: Option<f64>,
}

pub const CALIBRATION_HEADER: &str = "ece,fitted_temperature,n,bins";

impl CalibrationReport {
    pub fn csv_row(&self) -> String {
        let n: usize = self.bins.iter().map(|b| b.count).sum();
        let t = self.fitted_temperature.map(format_f64).unwrap_or_default();
        format!("{},{},{},{}", format_f64(self.ece), t, n, self.bins.len())
    }
}

/// Bin index for a confidence: bins are `(j/M, (j+1)/M]`, with 0 going to
/// the first bin.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let j = (confidence * bins as f64).ceil() as usize;
    j.saturating_sub(1).min(bins - 1)
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<CalibrationReport> {
    if bins == 0 {
        return Err(Error::Config("ece needs at least one bin".into()));
    }
    if confidences.len() != correct.len() {
        return Err(Error::Data(format!(
            "{} confidences but {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    if confidences.is_empty() {
        return Err(Error::Data("ece of an empty set".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Data(format!("confidence {c} outside [0, 1]")));
    }

    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }

    let n = confidences.len() as f64;
    let mut ece = 0.0;
    let mut records = Vec::with_capacity(bins);
    for b in 0..bins {
        let (confidence, accuracy) = if count[b] > 0 {
            let nb = count[b] as f64;
            (conf_sum[b] / nb, hits[b] as f64 / nb)
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            ece += count[b] as f64 / n * (accuracy - confidence).abs();
        }
        records.push(CalibrationBin {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            count: count[b],
            confidence,
            accuracy,
        });
    }
    Ok(CalibrationReport {
        ece,
        bins: records,
        fitted_temperature: None,
    })
}

/// Max-softmax confidence and correctness per row of `logits`, after
/// dividing the logits by `temperature`.
pub fn confidences(logits: &Matrix, labels: &[usize], temperature: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    if logits.rows() != labels.len() {
        return Err(Error::Data(format!("{} logit rows but {} labels", logits.rows(), labels.len())));
    }
    let mut conf = Vec::with_capacity(labels.len());
    let mut correct = Vec::with_capacity(labels.len());
    let mut scaled = vec![0.0; logits.cols()];
    for (row, &y) in logits.row_iter().zip(labels) {
        for (s, v) in scaled.iter_mut().zip(row) {
            *s = v / temperature;
        }
        let p = crate::tensor::softmax(&scaled);
        let pred = crate::tensor::argmax(&p);
        conf.push(p[pred]);
        correct.push(pred == y);
    }
    Ok((conf, correct))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits / T)`.
pub fn nll_at_temperature(logits: &Matrix, labels: &[usize], temperature: f64) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Data(format!("{} logit rows but {} labels", logits.rows(), labels.len())));
    }
    let mut scaled = vec![0.0; logits.cols()];
    let mut total = 0.0;
    for (row, &y) in logits.row_iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::Data(format!("label {y} out of range for {} classes", row.len())));
        }
        for (s, v) in scaled.iter_mut().zip(row) {
            *s = v / temperature;
        }
        total += cross_entropy_row(&scaled, y);
    }
    Ok(total / labels.len() as f64)
}

const LOG_T_RANGE: (f64, f64) = (-4.0, 4.0);
const LOG_T_TOLERANCE: f64 = 1e-4;

/// Temperature minimising validation NLL: golden-section search on
/// `log10 T` over `[-4, 4]`. Never worse than `T = 1`.
pub fn fit_temperature(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let nll = |log_t: f64| nll_at_temperature(logits, labels, 10f64.powf(log_t));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LOG_T_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (nll(c)?, nll(d)?);
    while b - a > LOG_T_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = nll(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = nll(d)?;
        }
    }
    let log_t = (a + b) / 2.0;
    let t = 10f64.powf(log_t);
    let best = if nll_at_temperature(logits, labels, t)? <= nll_at_temperature(logits, labels, 1.0)? {
        t
    } else {
        1.0
    };
    Ok(best)
}
