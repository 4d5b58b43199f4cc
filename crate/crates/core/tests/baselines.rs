mod common;

use common::cox_fixtures::{check, ln2_fixture, random_fixtures, separation_fixtures, Outcome};
use common::oracles::breslow_loglik;
use form::baselines::{
    cox_fit, cox_log_likelihood, fit_cox_pca, pca_fit, predict_cox_pca, select_cox_pca, CoxConfig, CoxPcaInputs,
    SurvivalData, Ties,
};
use form::evalharness::roc_auc;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn newton_matches_grid_search() {
    let mut matched = 0;
    for (i, f) in std::iter::once(ln2_fixture()).chain(random_fixtures(40, 17)).enumerate() {
        match check(&f) {
            Outcome::Match(_) => matched += 1,
            Outcome::Diverged => {}
            Outcome::Mismatch(m) => panic!("fixture {i}: {m}"),
        }
    }
    assert!(matched >= 20, "only {matched} interior fixtures");
}

#[test]
fn separated_fixtures_diverge() {
    for f in separation_fixtures() {
        assert!(matches!(check(&f), Outcome::Diverged), "{f:?}");
    }
}

#[test]
fn efron_equals_breslow_without_ties() {
    let x = Array2::from_shape_vec((5, 1), vec![0.5, -1.0, 0.2, 1.3, 0.0]).unwrap();
    let times = [1.0, 2.0, 3.0, 4.0, 5.0];
    let events = [true, false, true, true, true];
    let data = SurvivalData { x: x.view(), times: &times, events: &events };
    let b = cox_fit(&data, &["z".into()], &CoxConfig::default()).unwrap();
    let e = cox_fit(&data, &["z".into()], &CoxConfig { ties: Ties::Efron, ..Default::default() }).unwrap();
    assert!((b.beta[0] - e.beta[0]).abs() < 1e-10);
}

proptest! {
    #[test]
    fn loglik_agrees_with_definition_and_fit_beats_null(seed in any::<u64>()) {
        let f = &random_fixtures(1, seed)[0];
        let p = f.x[0].len();
        let x = Array2::from_shape_fn((f.x.len(), p), |(i, j)| f.x[i][j]);
        let data = SurvivalData { x: x.view(), times: &f.times, events: &f.events };
        let beta: Vec<f64> = (0..p).map(|j| 0.3 - 0.7 * j as f64).collect();
        let ours = cox_log_likelihood(&data, &beta, Ties::Breslow);
        prop_assert!((ours - breslow_loglik(&f.x, &f.times, &f.events, &beta)).abs() < 1e-10);
        let names: Vec<String> = (0..p).map(|j| format!("z{j}")).collect();
        if let Ok(m) = cox_fit(&data, &names, &CoxConfig::default()) {
            prop_assert!(m.log_likelihood >= m.null_log_likelihood - 1e-12);
        }
    }

    #[test]
    fn pca_components_orthonormal(seed in any::<u64>(), n in 6usize..30, d in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0));
        let c = d.min(n - 1);
        let p = pca_fit(x.view(), c).unwrap();
        for i in 0..c {
            for j in 0..c {
                let dot: f64 = p.components[i].iter().zip(&p.components[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-9);
            }
        }
        prop_assert!(p.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        prop_assert!(p.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-9);
    }
}

fn survival_with_features(n: usize, seed: u64) -> (CoxPcaInputs, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let features = Array2::from_shape_fn((n, 8), |(i, j)| latent[i] * (j as f64 + 1.0) / 8.0 + 0.3 * rng.gen_range(-1.0..1.0));
    let rf = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.0..1.0));
    let times: Vec<f64> = latent.iter().map(|l| (-rng.gen::<f64>().ln()) / (1.5 * l).exp() * 3.0).collect();
    let events: Vec<bool> = times.iter().map(|&t| t < 10.0).collect();
    let times = times.iter().map(|t| t.min(10.0)).collect();
    let labels = events.clone();
    (CoxPcaInputs { features: Some(features), rf: Some(rf), rf_names: vec!["age".into()], times, events }, labels)
}

#[test]
fn pca_cox_recovers_latent_risk() {
    let (train, _) = survival_with_features(300, 1);
    let (val, labels) = survival_with_features(200, 2);
    let m = fit_cox_pca(&train, 1, &CoxConfig::default()).unwrap();
    assert_eq!(m.cox.names, vec!["pc_0", "age"]);
    let auc = roc_auc(&predict_cox_pca(&m, &val).unwrap(), &labels).unwrap();
    assert!(auc > 0.7, "AUC {auc}");
    let (best, best_auc) = select_cox_pca(&train, &val, &labels, 3, &CoxConfig::default()).unwrap();
    assert!(best_auc >= auc - 1e-12);
    assert!(best.pca.unwrap().n_components() <= 3);
}
