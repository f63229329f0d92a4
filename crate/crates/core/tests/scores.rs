use logitnorm::model::MlpModel;
use logitnorm::scores::{
    gradnorm_score, label_scores, msp_score, odin_score, read_score_dump, score_batch, score_dump, ScoreConfig,
    ScoreKind,
};
use logitnorm::tensor::{argmax, softmax, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(dims: &[usize], rng: &mut ChaCha8Rng) -> MlpModel {
    let base = MlpModel::init(dims, rng.gen()).unwrap();
    let biases = base
        .biases()
        .iter()
        .map(|b| Matrix::from_vec(1, b.cols(), (0..b.cols()).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap())
        .collect();
    MlpModel::from_parameters(dims.to_vec(), base.weights().to_vec(), biases).unwrap()
}

fn random_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn odin_without_perturbation_is_msp(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&[5, 8, 4], &mut rng);
        let x = random_rows(1, 5, &mut rng);
        let odin = odin_score(&model, x.row(0), 1.0, 0.0).unwrap();
        let msp = msp_score(&model, x.row(0)).unwrap();
        prop_assert!((odin - msp).abs() <= 1e-12);
    }

    #[test]
    fn hot_odin_keeps_range_and_argmax(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 4;
        let model = random_model(&[5, 8, k], &mut rng);
        let x = random_rows(1, 5, &mut rng);
        let odin = odin_score(&model, x.row(0), 1000.0, 0.0).unwrap();
        prop_assert!(odin > 1.0 / k as f64 && odin <= 1.0);
        let logits = model.forward(&x).unwrap();
        let cooled: Vec<f64> = logits.row(0).iter().map(|v| v / 1000.0).collect();
        prop_assert_eq!(argmax(&softmax(&cooled)), argmax(logits.row(0)));
    }

    /// The last-layer gradient of CE(softmax(f / T), uniform) is
    /// `h (p - u)^T / T`, so its L1 norm factorises.
    #[test]
    fn gradnorm_matches_outer_product(seed in any::<u64>(), t in prop::sample::select(vec![0.5, 1.0, 2.0])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 5;
        let model = random_model(&[3, 6, 7, k], &mut rng);
        let x = random_rows(1, 3, &mut rng);
        let (h, logits) = model.forward_with_features(&x).unwrap();
        let tempered: Vec<f64> = logits.row(0).iter().map(|v| v / t).collect();
        let p = softmax(&tempered);
        let l1_h: f64 = h.row(0).iter().map(|v| v.abs()).sum();
        let l1_pu: f64 = p.iter().map(|pi| (pi - 1.0 / k as f64).abs()).sum();
        let expected = l1_h * l1_pu / t;
        let got = gradnorm_score(&model, x.row(0), t).unwrap();
        prop_assert!((got - expected).abs() <= 1e-12 * expected.max(1.0), "{got} vs {expected}");
    }
}

/// Bias-free ReLU layers are positively homogeneous, and a zero last-layer
/// weight pins the logits to the last bias, so doubling the input doubles
/// the penultimate features while the softmax stays put.
#[test]
fn gradnorm_doubles_with_features_under_frozen_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let dims = [4, 6, 6, 3];
        let base = MlpModel::init(&dims, rng.gen()).unwrap();
        let mut weights = base.weights().to_vec();
        weights[2] = Matrix::zeros(6, 3);
        let mut biases: Vec<Matrix> = base.biases().to_vec();
        biases[2] = Matrix::from_vec(1, 3, (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let model = MlpModel::from_parameters(dims.to_vec(), weights, biases).unwrap();

        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let g1 = gradnorm_score(&model, &x, 1.0).unwrap();
        let g2 = gradnorm_score(&model, &x2, 1.0).unwrap();
        assert!((g2 - 2.0 * g1).abs() <= 1e-12 * g1.max(1.0), "{g2} vs 2 * {g1}");
    }
}

#[test]
fn batch_scores_are_finite_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = random_model(&[4, 10, 10, 3], &mut rng);
    let mut data = random_rows(40, 4, &mut rng).into_vec();
    // include far-out inputs whose logits are large
    data[0] = 1e4;
    data[5] = -1e4;
    let x = Matrix::from_vec(40, 4, data).unwrap();
    for kind in [ScoreKind::Msp, ScoreKind::Odin, ScoreKind::Energy, ScoreKind::GradNorm] {
        let cfg = ScoreConfig::new(kind);
        let a = score_batch(&model, &x, &cfg).unwrap();
        let b = score_batch(&model, &x, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.is_finite()), "{kind:?}");
    }
}

#[test]
fn batched_scores_agree_with_single_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = random_model(&[4, 10, 3], &mut rng);
    let x = random_rows(12, 4, &mut rng);
    let batched = score_batch(&model, &x, &ScoreConfig::new(ScoreKind::Msp)).unwrap();
    for (i, s) in batched.iter().enumerate() {
        assert!((s - msp_score(&model, x.row(i)).unwrap()).abs() <= 1e-15);
    }
}

#[test]
fn dump_file_round_trips_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let id: Vec<f64> = (0..30).map(|_| rng.gen::<f64>()).collect();
    let ood: Vec<f64> = (0..20).map(|_| rng.gen_range(-1e6..1e6)).collect();
    let scored = label_scores(&id, &ood);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.txt");
    std::fs::write(&path, score_dump(&scored)).unwrap();
    assert_eq!(read_score_dump(&path).unwrap(), scored);
}

#[test]
fn malformed_dump_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    std::fs::write(&path, "ID,0.5\nOOD,abc\n").unwrap();
    let err = read_score_dump(&path).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}
