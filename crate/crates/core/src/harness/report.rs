//! CSV emission shared by the harness operations.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::checkpoint::format_f64;
use crate::scores::{Origin, ScoredExample};

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std })
    }
}

/// One equal-width score bin with its ID and OOD counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistBin {
    pub left: f64,
    pub right: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

pub const HISTOGRAM_HEADER: &str = "bin_left,bin_right,id_count,ood_count";

/// Score distribution over `bins` equal-width bins spanning the observed
/// score range; the maximum falls in the last bin.
pub fn emit_histogram_data(scored: &[ScoredExample], bins: usize) -> Result<Vec<HistBin>> {
    if bins < 2 {
        return Err(Error::Config(format!("histograms need at least 2 bins, got {bins}")));
    }
    if scored.is_empty() {
        return Err(Error::Data("empty score dump".into()));
    }
    let lo = scored.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
    let hi = scored.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Data("non-finite score in dump".into()));
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistBin> = (0..bins)
        .map(|b| HistBin {
            left: lo + width * b as f64,
            right: if b + 1 == bins { hi } else { lo + width * (b + 1) as f64 },
            id_count: 0,
            ood_count: 0,
        })
        .collect();
    for s in scored {
        let b = if width > 0.0 {
            (((s.score - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        match s.origin {
            Origin::Id => out[b].id_count += 1,
            Origin::Ood => out[b].ood_count += 1,
        }
    }
    Ok(out)
}

pub fn histogram_csv(bins: &[HistBin]) -> String {
    let mut out = format!("{HISTOGRAM_HEADER}\n");
    for b in bins {
        writeln!(
            out,
            "{},{},{},{}",
            format_f64(b.left),
            format_f64(b.right),
            b.id_count,
            b.ood_count
        )
        .unwrap();
    }
    out
}

/// Index of the bin holding the most examples of `origin` (lowest on ties).
pub fn mode_bin(bins: &[HistBin], origin: Origin) -> Option<usize> {
    let count = |b: &HistBin| match origin {
        Origin::Id => b.id_count,
        Origin::Ood => b.ood_count,
    };
    let best = bins.iter().map(count).max()?;
    bins.iter().position(|b| count(b) == best)
}

pub(crate) fn csv_f64(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}
