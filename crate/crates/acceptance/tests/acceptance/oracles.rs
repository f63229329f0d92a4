//! Finite-difference, proposition and metric-oracle sweeps. Each returns the
//! number of instances checked and the first disagreement, if any.

use logitnorm::losses::{logitnorm_lower_bound, logitnorm_row, LossConfig, DEFAULT_STABILITY_EPS};
use logitnorm::metrics::{aupr, auroc, fpr_at_tpr};
use logitnorm::model::MlpModel;
use logitnorm::scores::{label_scores, ScoredExample};
use logitnorm::tensor::{argmax, logsumexp, softmax, Matrix, Targets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = (usize, Option<String>);

const H: f64 = 1e-5;

fn agrees(a: f64, n: f64) -> bool {
    let d = (a - n).abs();
    d <= 1e-6 || d <= 1e-4 * a.abs().max(n.abs())
}

fn hidden_margin(model: &MlpModel, x: &Matrix) -> f64 {
    let mut h = x.clone();
    let mut margin = f64::INFINITY;
    for l in 0..model.num_layers() - 1 {
        let z = h.matmul(&model.weights()[l]).unwrap().add_row_vector(&model.biases()[l]).unwrap();
        margin = z.as_slice().iter().fold(margin, |m, v| m.min(v.abs()));
        h = z.relu();
    }
    margin
}

fn random_instance(rng: &mut ChaCha8Rng) -> (MlpModel, Matrix, Vec<usize>) {
    loop {
        let d = rng.gen_range(2..=5);
        let hidden = rng.gen_range(3..=8);
        let k = rng.gen_range(2..=6);
        let dims = vec![d, hidden, k];
        let init = MlpModel::init(&dims, rng.gen()).unwrap();
        let biases = init
            .biases()
            .iter()
            .map(|b| Matrix::from_vec(1, b.cols(), (0..b.cols()).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap())
            .collect();
        let model = MlpModel::from_parameters(dims, init.weights().to_vec(), biases).unwrap();
        let n = rng.gen_range(1..=3);
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let labels = (0..n).map(|_| rng.gen_range(0..k)).collect();
        if hidden_margin(&model, &x) > 1e-3 {
            return (model, x, labels);
        }
    }
}

fn nudged(model: &MlpModel, layer: usize, bias: bool, idx: usize, delta: f64) -> MlpModel {
    let mut w = model.weights().to_vec();
    let mut b = model.biases().to_vec();
    let m = if bias { &mut b[layer] } else { &mut w[layer] };
    let mut data = m.as_slice().to_vec();
    data[idx] += delta;
    *m = Matrix::from_vec(m.rows(), m.cols(), data).unwrap();
    MlpModel::from_parameters(model.layer_dims().to_vec(), w, b).unwrap()
}

/// Every training loss against parameters, plus the input gradient used by
/// the perturbation score and the last-layer gradient used by the
/// gradient-norm score.
pub fn gradients(instances_per_path: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0;
    let losses = [
        LossConfig::cross_entropy(),
        LossConfig::logit_norm(0.04),
        LossConfig::logit_norm(1.0),
        LossConfig::logit_penalty(0.05),
    ];
    for loss in &losses {
        for _ in 0..instances_per_path {
            let (model, x, labels) = random_instance(&mut rng);
            let mut tr = model.forward_traced(&x, false).unwrap();
            let out = loss.build(&mut tr.tape, tr.logits, &labels).unwrap();
            let grads = tr.tape.backward(out).unwrap();
            let value = |m: &MlpModel| {
                let per = loss.per_sample(&m.forward(&x).unwrap(), &labels).unwrap();
                per.iter().sum::<f64>() / per.len() as f64
            };
            for layer in 0..model.num_layers() {
                for (bias, var) in [(false, tr.weights[layer]), (true, tr.biases[layer])] {
                    let g = grads.get(var).unwrap();
                    for idx in 0..g.len() {
                        let n = (value(&nudged(&model, layer, bias, idx, H)) - value(&nudged(&model, layer, bias, idx, -H)))
                            / (2.0 * H);
                        if !agrees(g.as_slice()[idx], n) {
                            return (checked, Some(format!("{} layer {layer}: {} vs {n}", loss.label(), g.as_slice()[idx])));
                        }
                    }
                }
            }
            checked += 1;
        }
    }

    for _ in 0..instances_per_path {
        let (model, x, _) = random_instance(&mut rng);
        let row = x.row(0).to_vec();
        let t = rng.gen_range(1.0..1000.0);
        let input = Matrix::row_vector(&row).unwrap();
        let mut tr = model.forward_traced(&input, true).unwrap();
        let y = argmax(tr.tape.value(tr.logits).row(0));
        let z = tr.tape.scale(tr.logits, 1.0 / t).unwrap();
        let nll = tr.tape.softmax_cross_entropy(z, Targets::Labels(vec![y])).unwrap();
        let g = tr.tape.backward(nll).unwrap().get(tr.input).unwrap().clone();
        let f = |v: &[f64]| {
            let l = model.forward(&Matrix::row_vector(v).unwrap()).unwrap();
            let s: Vec<f64> = l.row(0).iter().map(|a| a / t).collect();
            logsumexp(&s) - s[y]
        };
        for j in 0..row.len() {
            let (mut p, mut m) = (row.clone(), row.clone());
            p[j] += H;
            m[j] -= H;
            let n = (f(&p) - f(&m)) / (2.0 * H);
            if !agrees(g.as_slice()[j], n) {
                return (checked, Some(format!("input gradient x[{j}]: {} vs {n}", g.as_slice()[j])));
            }
        }
        checked += 1;
    }

    for _ in 0..instances_per_path {
        let (model, x, _) = random_instance(&mut rng);
        let input = Matrix::row_vector(x.row(0)).unwrap();
        let k = model.num_classes();
        let last = model.num_layers() - 1;
        let mut tr = model.forward_traced(&input, false).unwrap();
        let u = Matrix::filled(1, k, 1.0 / k as f64).unwrap();
        let loss = tr.tape.softmax_cross_entropy(tr.logits, Targets::Soft(u)).unwrap();
        let g = tr.tape.backward(loss).unwrap().get(tr.weights[last]).unwrap().clone();
        let f = |m: &MlpModel| {
            let l = m.forward(&input).unwrap();
            let lse = logsumexp(l.row(0));
            l.row(0).iter().map(|v| (lse - v) / k as f64).sum::<f64>()
        };
        for idx in 0..g.len() {
            let n = (f(&nudged(&model, last, false, idx, H)) - f(&nudged(&model, last, false, idx, -H))) / (2.0 * H);
            if !agrees(g.as_slice()[idx], n) {
                return (checked, Some(format!("uniform-target gradient {idx}: {} vs {n}", g.as_slice()[idx])));
            }
        }
        checked += 1;
    }
    (checked, None)
}

fn random_logits(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = rng.gen_range(2..=20);
    let scale = [0.1, 1.0, 10.0, 100.0][rng.gen_range(0..4)];
    (0..k).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()
}

pub fn argmax_invariance(draws: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for i in 0..draws {
        let f = random_logits(&mut rng);
        let c = argmax(&f);
        for s in [1.5, 2.0, 10.0, 1000.0] {
            let sf: Vec<f64> = f.iter().map(|v| s * v).collect();
            if argmax(&sf) != c {
                return (i, Some(format!("{f:?} scaled by {s}")));
            }
        }
    }
    (draws, None)
}

pub fn confidence_monotonicity(draws: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for i in 0..draws {
        let f = random_logits(&mut rng);
        let c = argmax(&f);
        let s = rng.gen_range(1.0..50.0);
        let sf: Vec<f64> = f.iter().map(|v| s * v).collect();
        if softmax(&sf)[c] < softmax(&f)[c] - 1e-12 {
            return (i, Some(format!("{f:?} scaled by {s}")));
        }
    }
    (draws, None)
}

pub fn loss_floor(draws: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for i in 0..draws {
        let f = random_logits(&mut rng);
        let k = f.len();
        let y = rng.gen_range(0..k);
        let tau = [0.01, 0.04, 0.5, 1.0, 2.0][rng.gen_range(0..5)];
        let loss = logitnorm_row(&f, y, tau, DEFAULT_STABILITY_EPS);
        let bound = logitnorm_lower_bound(k, tau).unwrap();
        if loss < bound - 1e-12 {
            return (i, Some(format!("k={k} tau={tau}: {loss} < {bound}")));
        }
    }
    (draws, None)
}

fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let credit: f64 = id
        .iter()
        .flat_map(|a| ood.iter().map(move |b| if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 }))
        .sum();
    credit / (id.len() * ood.len()) as f64
}

fn exhaustive_fpr(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let gamma = id
        .iter()
        .chain(ood)
        .copied()
        .filter(|&g| id.iter().filter(|&&s| s >= g).count() as f64 / id.len() as f64 >= target)
        .fold(f64::NEG_INFINITY, f64::max);
    ood.iter().filter(|&&s| s >= gamma).count() as f64 / ood.len() as f64
}

fn sweep_aupr(id: &[f64], ood: &[f64]) -> f64 {
    let mut ts: Vec<f64> = id.iter().chain(ood).copied().collect();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let (mut area, mut prev) = (0.0, 0.0);
    for t in ts {
        let tp = id.iter().filter(|&&s| s >= t).count();
        let fp = ood.iter().filter(|&&s| s >= t).count();
        let recall = tp as f64 / id.len() as f64;
        area += (recall - prev) * (tp as f64 / (tp + fp) as f64);
        prev = recall;
    }
    area
}

fn transformed(scored: &[ScoredExample]) -> Vec<ScoredExample> {
    scored
        .iter()
        .map(|s| ScoredExample {
            score: s.score.exp() + 2.0 * s.score * s.score * s.score,
            origin: s.origin,
        })
        .collect()
}

pub fn metric_oracles(sets: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for i in 0..sets {
        let n = rng.gen_range(1..=50);
        let m = rng.gen_range(1..=50);
        // small integer scores tie often and stay exact under the transform
        let levels = rng.gen_range(2..=12);
        let mut draw = |c: usize| -> Vec<f64> { (0..c).map(|_| rng.gen_range(0..levels) as f64).collect() };
        let (id, ood) = (draw(n), draw(m));
        let scored = label_scores(&id, &ood);
        let moved = transformed(&scored);
        let checks = [
            ("auroc", auroc(&scored).unwrap(), pairwise_auroc(&id, &ood)),
            ("aupr", aupr(&scored).unwrap(), sweep_aupr(&id, &ood)),
            ("fpr95", fpr_at_tpr(&scored, 0.95).unwrap(), exhaustive_fpr(&id, &ood, 0.95)),
            ("auroc after transform", auroc(&moved).unwrap(), auroc(&scored).unwrap()),
            ("aupr after transform", aupr(&moved).unwrap(), aupr(&scored).unwrap()),
            ("fpr95 after transform", fpr_at_tpr(&moved, 0.95).unwrap(), fpr_at_tpr(&scored, 0.95).unwrap()),
        ];
        for (what, got, want) in checks {
            if got != want {
                return (i, Some(format!("{what}: {got} vs {want} on {id:?} / {ood:?}")));
            }
        }
    }
    (sets, None)
}
