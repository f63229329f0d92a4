//! Mini-batch SGD with momentum, weight decay and a step learning-rate
//! schedule, plus per-epoch logit-norm telemetry.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, OodDataset};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::checkpoint::format_f64;
use crate::model::MlpModel;
use crate::rng::{stream_rng, streams};
use crate::tensor::{argmax, row_l2_norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `(epoch, factor)`: from `epoch` on, the rate is multiplied by `factor`.
    pub lr_drops: Vec<(usize, f64)>,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 200,
            batch_size: 128,
            lr_drops: vec![(80, 0.1), (140, 0.1)],
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be >= 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let mut prev: Option<usize> = None;
        for &(epoch, factor) in &self.lr_drops {
            if prev.is_some_and(|p| epoch <= p) {
                return Err(Error::Config("lr_drops epochs must be strictly increasing".into()));
            }
            if epoch >= self.epochs {
                return Err(Error::Config(format!(
                    "lr drop at epoch {epoch} is not below epochs = {}",
                    self.epochs
                )));
            }
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::Config(format!("lr drop factor must be positive, got {factor}")));
            }
            prev = Some(epoch);
        }
        Ok(())
    }
}

/// Learning rate in effect during zero-based `epoch`.
pub fn lr_at(config: &OptimConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside schedule of {} epochs",
            config.epochs
        )));
    }
    Ok(config
        .lr_drops
        .iter()
        .filter(|(at, _)| *at <= epoch)
        .fold(config.lr0, |lr, (_, factor)| lr * factor))
}

/// Measurements taken after each epoch. `epoch` is one-based: entry `e`
/// describes the model after `e` full passes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTelemetry {
    pub epoch: usize,
    /// Sample-weighted mean of the mini-batch losses seen during the epoch.
    pub train_loss: f64,
    /// Accuracy on the full training set at the end of the epoch.
    pub train_acc: f64,
    pub mean_logit_norm_id: f64,
    pub mean_logit_norm_ood: Option<f64>,
}

pub const TELEMETRY_HEADER: &str = "epoch,train_loss,train_acc,mean_logit_norm_id,mean_logit_norm_ood";

pub fn telemetry_csv(rows: &[EpochTelemetry]) -> String {
    let mut out = String::from(TELEMETRY_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            format_f64(r.train_loss),
            format_f64(r.train_acc),
            format_f64(r.mean_logit_norm_id),
            r.mean_logit_norm_ood.map(format_f64).unwrap_or_default()
        )
        .unwrap();
    }
    out
}

/// Velocity buffers, one per weight and bias.
#[derive(Debug, Clone)]
pub struct MomentumState {
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

impl MomentumState {
    pub fn zeros_like(model: &MlpModel) -> Self {
        MomentumState {
            weights: model.weights().iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: model.biases().iter().map(|b| Matrix::zeros(b.rows(), b.cols())).collect(),
        }
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }
}

/// One update: `g += wd * W` (weights only), `v = m v + g`, `p -= lr v`.
pub fn sgd_step(
    model: &mut MlpModel,
    state: &mut MomentumState,
    weight_grads: &[Matrix],
    bias_grads: &[Matrix],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (weights, biases) = model.parameters_mut();
    for ((w, v), g) in weights.iter_mut().zip(&mut state.weights).zip(weight_grads) {
        update(w.data_mut(), v.data_mut(), g.as_slice(), lr, momentum, weight_decay);
    }
    for ((b, v), g) in biases.iter_mut().zip(&mut state.biases).zip(bias_grads) {
        update(b.data_mut(), v.data_mut(), g.as_slice(), lr, momentum, 0.0);
    }
    let finite = weights
        .iter()
        .chain(biases.iter())
        .all(|m| m.as_slice().iter().all(|v| v.is_finite()));
    if finite {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "sgd_step" })
    }
}

fn update(param: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64, wd: f64) {
    for ((p, v), &g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        let g = g + wd * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Accuracy and mean logit norm of `model` on `features`.
pub fn evaluate(model: &MlpModel, features: &Matrix, labels: Option<&[usize]>) -> Result<(Option<f64>, f64)> {
    let logits = model.forward(features)?;
    let norms = row_l2_norm(&logits);
    let mean_norm = norms.iter().sum::<f64>() / norms.len() as f64;
    let acc = labels.map(|labels| {
        let correct = logits
            .row_iter()
            .zip(labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        correct as f64 / labels.len() as f64
    });
    Ok((acc, mean_norm))
}

/// Trains a copy of `model`, returning it with one telemetry row per epoch.
pub fn train(
    model: &MlpModel,
    dataset: &LabeledDataset,
    loss: &LossConfig,
    optim: &OptimConfig,
    probe_ood: Option<&OodDataset>,
) -> Result<(MlpModel, Vec<EpochTelemetry>)> {
    optim.validate()?;
    loss.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if dataset.dim() != model.input_dim() || dataset.k != model.num_classes() {
        return Err(Error::shape(
            "train",
            format!(
                "dataset is d={} k={}, model is {}->{}",
                dataset.dim(),
                dataset.k,
                model.input_dim(),
                model.num_classes()
            ),
        ));
    }
    if let Some(ood) = probe_ood {
        if ood.dim() != model.input_dim() {
            return Err(Error::shape("train", "probe OOD set has the wrong dimension"));
        }
    }

    let mut model = model.clone();
    let mut state = MomentumState::zeros_like(&model);
    let mut rng = stream_rng(optim.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut telemetry = Vec::with_capacity(optim.epochs);
    let diverged = |epoch: usize, step: usize| move |e: Error| match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, step },
        other => other,
    };

    for epoch in 0..optim.epochs {
        let lr = lr_at(optim, epoch)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(optim.batch_size).enumerate() {
            let (epoch, step) = (epoch + 1, step + 1);
            let x = dataset.features.select_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.labels[i]).collect();
            let mut traced = model.forward_traced(&x, false).map_err(diverged(epoch, step))?;
            let loss_var = loss
                .build(&mut traced.tape, traced.logits, &labels)
                .map_err(diverged(epoch, step))?;
            let value = traced.tape.value(loss_var).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            loss_sum += value * batch.len() as f64;
            let mut grads = traced.tape.backward(loss_var).map_err(diverged(epoch, step))?;
            let weight_grads: Vec<Matrix> = traced
                .weights
                .iter()
                .map(|&v| grads.take(v).expect("parameters require grad"))
                .collect();
            let bias_grads: Vec<Matrix> = traced
                .biases
                .iter()
                .map(|&v| grads.take(v).expect("parameters require grad"))
                .collect();
            sgd_step(
                &mut model,
                &mut state,
                &weight_grads,
                &bias_grads,
                lr,
                optim.momentum,
                optim.weight_decay,
            )
            .map_err(diverged(epoch, step))?;
        }
        let steps = order.len().div_ceil(optim.batch_size);
        let (acc, norm_id) = evaluate(&model, &dataset.features, Some(&dataset.labels)).map_err(diverged(epoch, steps))?;
        let norm_ood = probe_ood
            .map(|ood| evaluate(&model, &ood.features, None).map(|(_, n)| n))
            .transpose()
            .map_err(diverged(epoch, steps))?;
        telemetry.push(EpochTelemetry {
            epoch: epoch + 1,
            train_loss: loss_sum / dataset.len() as f64,
            train_acc: acc.unwrap_or(0.0),
            mean_logit_norm_id: norm_id,
            mean_logit_norm_ood: norm_ood,
        });
        log::debug!(
            "epoch {} loss {:.5} acc {:.4} norm {:.3}",
            epoch + 1,
            loss_sum / dataset.len() as f64,
            acc.unwrap_or(0.0),
            norm_id
        );
    }
    Ok((model, telemetry))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standard_schedule() -> OptimConfig {
        OptimConfig::default()
    }

    #[test]
    fn lr_schedule_examples() {
        let c = standard_schedule();
        assert_eq!(lr_at(&c, 0).unwrap(), 0.1);
        assert!((lr_at(&c, 79).unwrap() - 0.1).abs() < 1e-15);
        assert!((lr_at(&c, 100).unwrap() - 0.01).abs() < 1e-15);
        assert!((lr_at(&c, 150).unwrap() - 0.001).abs() < 1e-15);
        assert!(matches!(lr_at(&c, 200), Err(Error::Contract(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = standard_schedule();
        c.lr_drops = vec![(140, 0.1), (80, 0.1)];
        assert!(c.validate().is_err());
        c.lr_drops = vec![(80, 0.1), (200, 0.1)];
        assert!(c.validate().is_err());
        let mut c = standard_schedule();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = standard_schedule();
        c.momentum = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut model = MlpModel::init(&[3, 4, 2], 1).unwrap();
        let reference = model.clone();
        let mut state = MomentumState::zeros_like(&model);
        let gw: Vec<Matrix> = model
            .weights()
            .iter()
            .map(|w| w.map("t", |v| v * 0.5 + 0.1).unwrap())
            .collect();
        let gb: Vec<Matrix> = model.biases().iter().map(|b| b.map("t", |_| -0.3).unwrap()).collect();
        for _ in 0..3 {
            sgd_step(&mut model, &mut state, &gw, &gb, 0.05, 0.0, 0.01).unwrap();
        }
        let mut plain = reference;
        for _ in 0..3 {
            let (ws, bs) = plain.parameters_mut();
            for (w, g) in ws.iter_mut().zip(&gw) {
                for (p, &gv) in w.data_mut().iter_mut().zip(g.as_slice()) {
                    *p -= 0.05 * (gv + 0.01 * *p);
                }
            }
            for (b, g) in bs.iter_mut().zip(&gb) {
                for (p, &gv) in b.data_mut().iter_mut().zip(g.as_slice()) {
                    *p -= 0.05 * gv;
                }
            }
        }
        assert_eq!(model, plain);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut model = MlpModel::init(&[2, 2], 0).unwrap();
        {
            let (_, bs) = model.parameters_mut();
            bs[0] = Matrix::row_vector(&[1.0, -1.0]).unwrap();
        }
        let mut state = MomentumState::zeros_like(&model);
        let gw = vec![Matrix::zeros(2, 2)];
        let gb = vec![Matrix::zeros(1, 2)];
        let before = model.clone();
        sgd_step(&mut model, &mut state, &gw, &gb, 0.1, 0.9, 0.5).unwrap();
        assert_eq!(model.biases(), before.biases());
        assert_ne!(model.weights(), before.weights());
    }

    #[test]
    fn telemetry_csv_layout() {
        let rows = vec![EpochTelemetry {
            epoch: 1,
            train_loss: 0.5,
            train_acc: 1.0,
            mean_logit_norm_id: 2.0,
            mean_logit_norm_ood: None,
        }];
        let csv = telemetry_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(TELEMETRY_HEADER));
        assert_eq!(
            lines.next(),
            Some("1,5.0000000000000000e-1,1.0000000000000000e0,2.0000000000000000e0,")
        );
    }
}
