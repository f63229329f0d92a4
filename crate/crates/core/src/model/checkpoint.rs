//! Plain-text checkpoints.
//!
//! ```text
//! # logitnorm checkpoint
//! format = 1
//! activation = relu
//! config_hash = 3f1a...
//! layer_dims = 16 64 64 10
//! weight 0 16 64
//! <16 lines of 64 comma-separated values>
//! bias 0 64
//! <1 line of 64 values>
//! ...
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every
//! `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use super::MlpModel;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const HEADER: &str = "# logitnorm checkpoint";
const ACTIVATION: &str = "relu";

/// Formats a float with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct Checkpoint {
    pub model: MlpModel,
    pub config_hash: Option<String>,
}

pub fn to_string(model: &MlpModel, config_hash: Option<&str>) -> String {
    let mut out = String::new();
    let dims: Vec<String> = model.layer_dims().iter().map(usize::to_string).collect();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(out, "format = 1").unwrap();
    writeln!(out, "activation = {ACTIVATION}").unwrap();
    writeln!(out, "config_hash = {}", config_hash.unwrap_or("none")).unwrap();
    writeln!(out, "layer_dims = {}", dims.join(" ")).unwrap();
    for (l, (w, b)) in model.weights().iter().zip(model.biases()).enumerate() {
        writeln!(out, "weight {l} {} {}", w.rows(), w.cols()).unwrap();
        for row in w.row_iter() {
            write_row(&mut out, row);
        }
        writeln!(out, "bias {l} {}", b.cols()).unwrap();
        write_row(&mut out, b.as_slice());
    }
    out
}

fn write_row(out: &mut String, row: &[f64]) {
    let cells: Vec<String> = row.iter().map(|&v| format_f64(v)).collect();
    out.push_str(&cells.join(","));
    out.push('\n');
}

pub fn save(path: &Path, model: &MlpModel, config_hash: Option<&str>) -> Result<()> {
    std::fs::write(path, to_string(model, config_hash)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|e| e.context(format!("checkpoint {}", path.display())))
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::Data("checkpoint truncated".into()))
    }

    fn key(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (n, line) = self.next()?;
        match line.split_once('=') {
            Some((k, v)) if k.trim() == key => Ok((n, v.trim())),
            _ => Err(Error::Data(format!("line {n}: expected `{key} = ...`, found `{line}`"))),
        }
    }
}

fn parse_usize(n: usize, s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Data(format!("line {n}: bad count `{s}`")))
}

fn parse_row(n: usize, line: &str, expected: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split(',')
        .map(|c| {
            c.trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("line {n}: bad number `{c}`")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != expected {
        return Err(Error::Data(format!("line {n}: expected {expected} values, found {}", vals.len())));
    }
    Ok(vals)
}

pub fn parse(text: &str) -> Result<Checkpoint> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (_, header) = lines.next()?;
    if header != HEADER {
        return Err(Error::Data(format!("line 1: not a checkpoint header: `{header}`")));
    }
    let (n, format) = lines.key("format")?;
    if format != "1" {
        return Err(Error::Data(format!("line {n}: unsupported format `{format}`")));
    }
    let (n, activation) = lines.key("activation")?;
    if activation != ACTIVATION {
        return Err(Error::Data(format!("line {n}: unsupported activation `{activation}`")));
    }
    let (_, hash) = lines.key("config_hash")?;
    let config_hash = (hash != "none").then(|| hash.to_string());
    let (n, dims) = lines.key("layer_dims")?;
    let layer_dims: Vec<usize> = dims
        .split_whitespace()
        .map(|d| parse_usize(n, d))
        .collect::<Result<_>>()?;
    if layer_dims.len() < 2 {
        return Err(Error::Data(format!("line {n}: need at least two layer dims")));
    }

    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..layer_dims.len() - 1 {
        let (n, line) = lines.next()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "weight" || parts[1] != l.to_string() {
            return Err(Error::Data(format!("line {n}: expected `weight {l} <rows> <cols>`")));
        }
        let (rows, cols) = (parse_usize(n, parts[2])?, parse_usize(n, parts[3])?);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (n, line) = lines.next()?;
            data.extend(parse_row(n, line, cols)?);
        }
        weights.push(Matrix::from_vec(rows, cols, data)?);

        let (n, line) = lines.next()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "bias" || parts[1] != l.to_string() {
            return Err(Error::Data(format!("line {n}: expected `bias {l} <cols>`")));
        }
        let cols = parse_usize(n, parts[2])?;
        let (n, line) = lines.next()?;
        biases.push(Matrix::from_vec(1, cols, parse_row(n, line, cols)?)?);
    }
    let model = MlpModel::from_parameters(layer_dims, weights, biases)?;
    Ok(Checkpoint { model, config_hash })
}
