use form::cohort::{encode_risk_factors, fit_normalization, label_fracture, RfGroup};
use form::evalharness::roc_auc;
use form::nncore::TrainConfig;
use form::risk::{build_risk_model, predict_risk, train_risk_model, RiskBatch, RiskDataset, RiskInputs, RiskModelConfig};
use form::synthgen::{Coefficients, GeneratorConfig, SyntheticCohort};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn width_law(k in 1usize..20, s in 1usize..8, d in 1usize..64) {
        let cfg = RiskModelConfig { inputs: RiskInputs::Both, s, feature_dim: d, hidden: 8, ..Default::default() };
        let m = build_risk_model(&cfg, k).unwrap();
        prop_assert_eq!(m.branch_output_width(), Some(s * k));
        prop_assert_eq!(m.head_input_width(), s * k + k);
        let rf = build_risk_model(&RiskModelConfig { inputs: RiskInputs::Rf, ..cfg.clone() }, k).unwrap();
        prop_assert_eq!(rf.branch_output_width(), None);
        prop_assert_eq!(rf.head_input_width(), k);
        let img = build_risk_model(&RiskModelConfig { inputs: RiskInputs::Image, ..cfg }, k).unwrap();
        prop_assert_eq!(img.branch_output_width(), Some(128));
        prop_assert_eq!(img.head_input_width(), 128);
    }
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 36, learning_rate: 1e-3, seed: 3, ..Default::default() }
}

#[test]
fn shuffled_labels_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut draw = |n: usize| {
        let f = Array2::from_shape_fn((n, 16), |_| rng.gen::<f32>());
        let r = Array2::from_shape_fn((n, 3), |_| rng.gen::<f32>());
        let labels: Vec<usize> = (0..n).map(|_| usize::from(rng.gen::<f64>() < 0.3)).collect();
        RiskDataset { inputs: RiskBatch { features: Some(f), rf: Some(r) }, labels }
    };
    let (train, test) = (draw(400), draw(1000));
    let cfg = RiskModelConfig { inputs: RiskInputs::Both, feature_dim: 16, hidden: 32, train: small_train(10), ..Default::default() };
    let (m, _) = train_risk_model(&train, None, &cfg, 3).unwrap();
    let p = predict_risk(&m, &test.inputs).unwrap();
    let y: Vec<bool> = test.labels.iter().map(|&l| l == 1).collect();
    let auc = roc_auc(&p, &y).unwrap();
    assert!((auc - 0.5).abs() <= 0.06, "AUC {auc}");
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |x: &[f64]| {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let m = (a.len() as f64 - 1.0) / 2.0;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - m) * (y - m)).sum();
    let var: f64 = ra.iter().map(|x| (x - m) * (x - m)).sum();
    cov / var
}

#[test]
fn rf_predictions_track_true_probability() {
    let cfg = GeneratorConfig {
        n_patients: 3000,
        seed: 4,
        target_prevalence: 0.2,
        xray_dims: (64, 128),
        coefficients: Coefficients { a0: None, a1: 0.0, a2: 0.8, a3: 1.0, a4: 0.8, a5: 0.0 },
        ..Default::default()
    };
    let c = SyntheticCohort::generate(&cfg).unwrap();
    let schema = fit_normalization(&c.records, &c.schema).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut truth = Vec::new();
    for (r, t) in c.records.iter().zip(&c.truth.patients) {
        let l = label_fracture(r, 10.0).unwrap();
        if l.is_labeled() {
            rows.push(encode_risk_factors(r, &schema, RfGroup::Multiple).unwrap());
            labels.push(usize::from(l.is_positive()));
            truth.push(t.p);
        }
    }
    let k = rows[0].len();
    let split = rows.len() * 2 / 3;
    let data = |lo: usize, hi: usize| RiskDataset {
        inputs: RiskBatch::from_rows(None, Some(&rows[lo..hi])),
        labels: labels[lo..hi].to_vec(),
    };
    let rcfg = RiskModelConfig { inputs: RiskInputs::Rf, rf_group: RfGroup::Multiple, train: small_train(20), ..Default::default() };
    let (m, _) = train_risk_model(&data(0, split), None, &rcfg, k).unwrap();
    let test = data(split, rows.len());
    let p = predict_risk(&m, &test.inputs).unwrap();
    let rho = spearman(&p, &truth[split..]);
    assert!(rho > 0.3, "Spearman {rho}");
    assert_eq!(p, predict_risk(&m, &test.inputs).unwrap());
}
