use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use form::cohort::label_fracture;
use form::synthgen::{write_dataset, GeneratorConfig, SyntheticCohort};

fn small(n: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig { n_patients: n, seed, ct_fraction: 0.5, xray_dims: (64, 128), ..Default::default() }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn identical_config_gives_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&SyntheticCohort::generate(&small(12, 7)).unwrap(), a.path()).unwrap();
    write_dataset(&SyntheticCohort::generate(&small(12, 7)).unwrap(), b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 5);
    assert_eq!(ta, tb);
    let c = tempfile::tempdir().unwrap();
    write_dataset(&SyntheticCohort::generate(&small(12, 8)).unwrap(), c.path()).unwrap();
    assert_ne!(ta, tree(c.path()));
}

#[test]
fn event_rate_converges_to_target_prevalence() {
    let cfg = GeneratorConfig { n_patients: 10_000, seed: 1, xray_dims: (64, 128), ..Default::default() };
    let c = SyntheticCohort::generate(&cfg).unwrap();
    let rate = c.truth.patients.iter().filter(|p| p.fracture_within_horizon).count() as f64 / c.len() as f64;
    assert!((rate - cfg.target_prevalence).abs() < 0.005, "event rate {rate}");
    let mean_p = c.truth.patients.iter().map(|p| p.p).sum::<f64>() / c.len() as f64;
    assert!((mean_p - cfg.target_prevalence).abs() < 1e-6);
}

#[test]
fn every_record_has_exactly_one_label() {
    let c = SyntheticCohort::generate(&small(300, 3)).unwrap();
    for r in &c.records {
        for h in [1.0, 5.0, 10.0] {
            assert!(label_fracture(r, h).is_ok());
        }
    }
}
