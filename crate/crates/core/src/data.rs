//! Synthetic in-distribution and OOD datasets, stratified splits and
//! delimited-file ingestion.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::format_f64;
use crate::rng::{stream_rng, streams, Rng};
use crate::tensor::{l2_norm, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub k: usize,
    pub origin_tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodDataset {
    pub features: Matrix,
    pub origin_tag: String,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, k: usize, origin_tag: impl Into<String>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Data("dataset has no samples".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        Ok(LabeledDataset {
            features,
            labels,
            k,
            origin_tag: origin_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize], origin_tag: impl Into<String>) -> Result<Self> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset::new(self.features.select_rows(indices), labels, self.k, origin_tag)
    }

    /// Standard deviation pooled over every feature coordinate.
    pub fn feature_std(&self) -> f64 {
        let vals = self.features.as_slice();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    pub fn max_abs_feature(&self) -> f64 {
        self.features.as_slice().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_norm(&self) -> f64 {
        self.features.row_iter().map(l2_norm).fold(0.0, f64::max)
    }
}

impl OodDataset {
    pub fn new(features: Matrix, origin_tag: impl Into<String>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Data("OOD dataset has no samples".into()));
        }
        Ok(OodDataset {
            features,
            origin_tag: origin_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Parameters of the Gaussian-blob classification problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub k: usize,
    pub d: usize,
    pub n_per_class: usize,
    /// Standard deviation of every class Gaussian.
    pub cluster_spread: f64,
    /// Distance of every class mean from the origin.
    pub cluster_radius: f64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.d < 2 {
            return Err(Error::Config(format!("blobs need k >= 2 and d >= 2, got k={} d={}", self.k, self.d)));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_radius >= 0.0) {
            return Err(Error::Config("cluster spread and radius must be non-negative".into()));
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let n = l2_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Class means on the sphere of radius `radius`.
///
/// The first `min(k, d)` means are a seeded random orthonormal frame
/// (Gram-Schmidt on Gaussian draws) scaled by `radius`; any further means are
/// independent random directions.
pub fn blob_means(k: usize, d: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, streams::BLOB_MEANS);
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(k);
    while frame.len() < k.min(d) {
        let mut v = gaussian_vec(&mut rng, d);
        for q in &frame {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (x, qx) in v.iter_mut().zip(q) {
                *x -= dot * qx;
            }
        }
        let n = l2_norm(&v);
        if n > 1e-6 {
            frame.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    while frame.len() < k {
        frame.push(unit_vec(&mut rng, d));
    }
    frame
        .into_iter()
        .map(|q| q.into_iter().map(|x| x * radius).collect())
        .collect()
}

/// Isotropic Gaussian blobs, `n_per_class` points per class, class by class.
pub fn gen_blobs(spec: &BlobSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let means = blob_means(spec.k, spec.d, spec.cluster_radius, seed);
    let mut rng = stream_rng(seed, streams::BLOB_POINTS);
    let n = spec.k * spec.n_per_class;
    let mut data = Vec::with_capacity(n * spec.d);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + spec.cluster_spread * z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Matrix::from_vec(n, spec.d, data)?, labels, spec.k, "blobs")
}

/// OOD generator with fully resolved parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OodSpec {
    /// Uniform over `[-half_width, half_width]^d`.
    UniformBox { half_width: f64 },
    /// `N(mean, std^2)` independently per coordinate.
    GaussianNoise { mean: f64, std: f64 },
    /// Uniform directions at a radius drawn from `radius +- thickness / 2`.
    Ring { radius: f64, thickness: f64 },
    /// The in-distribution class means (regenerated from `means_seed`), each
    /// moved by `shift` in its own random direction, with Gaussian spread.
    ShiftedBlobs {
        k: usize,
        radius: f64,
        spread: f64,
        shift: f64,
        means_seed: u64,
    },
}

impl OodSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            OodSpec::UniformBox { .. } => "uniform_box",
            OodSpec::GaussianNoise { .. } => "gaussian_noise",
            OodSpec::Ring { .. } => "ring",
            OodSpec::ShiftedBlobs { .. } => "shifted_blobs",
        }
    }

    pub fn from_kind_name(name: &str) -> Result<&'static str> {
        ["uniform_box", "gaussian_noise", "ring", "shifted_blobs"]
            .into_iter()
            .find(|k| *k == name)
            .ok_or_else(|| Error::Config(format!("unknown OOD kind `{name}`")))
    }
}

pub fn gen_ood(spec: &OodSpec, d: usize, m: usize, seed: u64) -> Result<OodDataset> {
    if d == 0 || m == 0 {
        return Err(Error::Config(format!("OOD sets need d >= 1 and m >= 1, got d={d} m={m}")));
    }
    let mut rng = stream_rng(seed, streams::OOD);
    let mut data = Vec::with_capacity(m * d);
    match *spec {
        OodSpec::UniformBox { half_width } => {
            if !(half_width > 0.0) {
                return Err(Error::Config("uniform_box half_width must be positive".into()));
            }
            for _ in 0..m * d {
                data.push(rng.gen_range(-half_width..half_width));
            }
        }
        OodSpec::GaussianNoise { mean, std } => {
            if !(std >= 0.0) {
                return Err(Error::Config("gaussian_noise std must be non-negative".into()));
            }
            for _ in 0..m * d {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(mean + std * z);
            }
        }
        OodSpec::Ring { radius, thickness } => {
            if !(radius > 0.0 && thickness >= 0.0 && thickness < 2.0 * radius) {
                return Err(Error::Config("ring needs radius > 0 and 0 <= thickness < 2 radius".into()));
            }
            for _ in 0..m {
                let u = unit_vec(&mut rng, d);
                let r = radius + thickness * (rng.gen::<f64>() - 0.5);
                data.extend(u.into_iter().map(|x| x * r));
            }
        }
        OodSpec::ShiftedBlobs {
            k,
            radius,
            spread,
            shift,
            means_seed,
        } => {
            if k == 0 || !(spread >= 0.0 && shift >= 0.0) {
                return Err(Error::Config("shifted_blobs needs k >= 1 and non-negative spread/shift".into()));
            }
            let shifted: Vec<Vec<f64>> = blob_means(k, d, radius, means_seed)
                .into_iter()
                .map(|mean| {
                    let dir = unit_vec(&mut rng, d);
                    mean.iter().zip(&dir).map(|(m, u)| m + shift * u).collect()
                })
                .collect();
            for i in 0..m {
                let mean = &shifted[i % k];
                for &mu in mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(mu + spread * z);
                }
            }
        }
    }
    OodDataset::new(Matrix::from_vec(m, d, data)?, spec.kind_name())
}

/// Stratified split into `(train, test)`; `train_fraction` of every class
/// (rounded, at least one sample on each side) goes to train.
pub fn split(dataset: &LabeledDataset, train_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got train fraction {train_fraction}"
        )));
    }
    let mut rng = stream_rng(seed, streams::SPLIT);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..dataset.k {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Data(format!("class {c} has fewer than 2 samples, cannot split")));
        }
        members.shuffle(&mut rng);
        let n_train = ((members.len() as f64 * train_fraction).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((
        dataset.subset(&train, format!("{}_train", dataset.origin_tag))?,
        dataset.subset(&test, format!("{}_test", dataset.origin_tag))?,
    ))
}

/// Result of reading a delimited file.
#[derive(Debug, Clone, PartialEq)]
pub enum Loaded {
    Labeled(LabeledDataset),
    Unlabeled(OodDataset),
}

/// Reads comma-separated samples, one per line. `#` lines and blank lines
/// are skipped. With `has_label`, the last column is a class index; `k`
/// defaults to one more than the largest label seen.
pub fn load_delimited(path: &Path, has_label: bool, k: Option<usize>) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "file".into());
    parse_delimited(&text, has_label, k, &tag).map_err(|e| e.context(format!("{}", path.display())))
}

pub fn parse_delimited(text: &str, has_label: bool, k: Option<usize>, tag: &str) -> Result<Loaded> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Data(format!(
                    "line {line_no}: expected {w} columns, found {}",
                    cells.len()
                )))
            }
            _ => {}
        }
        let n_features = if has_label { cells.len() - 1 } else { cells.len() };
        if n_features == 0 {
            return Err(Error::Data(format!("line {line_no}: no feature columns")));
        }
        for (col, cell) in cells[..n_features].iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Data(format!("line {line_no}, column {}: `{cell}` is not a number", col + 1)))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {line_no}, column {}: non-finite value", col + 1)));
            }
            data.push(v);
        }
        if has_label {
            let cell = cells[n_features];
            let y: usize = cell
                .parse()
                .map_err(|_| Error::Data(format!("line {line_no}: label `{cell}` is not a class index")))?;
            if let Some(k) = k {
                if y >= k {
                    return Err(Error::Data(format!("line {line_no}: label {y} >= k = {k}")));
                }
            }
            labels.push(y);
        }
    }
    let Some(width) = width else {
        return Err(Error::Data("no samples found".into()));
    };
    let d = if has_label { width - 1 } else { width };
    let n = data.len() / d;
    let features = Matrix::from_vec(n, d, data)?;
    if has_label {
        let k = k.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        Ok(Loaded::Labeled(LabeledDataset::new(features, labels, k, tag)?))
    } else {
        Ok(Loaded::Unlabeled(OodDataset::new(features, tag)?))
    }
}

/// Writes features (and labels, when given) in the format `load_delimited` reads.
pub fn to_delimited(features: &Matrix, labels: Option<&[usize]>) -> String {
    let mut out = String::new();
    for (i, row) in features.row_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|&v| format_f64(v)).collect();
        out.push_str(&cells.join(","));
        if let Some(labels) = labels {
            write!(out, ",{}", labels[i]).unwrap();
        }
        out.push('\n');
    }
    out
}
