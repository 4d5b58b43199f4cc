//! Small survival fixtures checked against the grid-search oracle.

use form::baselines::{cox_fit, CoxConfig, SurvivalData};
use form::FormError;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::{breslow_loglik, grid_argmax};

pub const GRID_RANGE: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct Fixture {
    pub x: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

#[derive(Debug)]
pub enum Outcome {
    /// Newton-Raphson and the grid agree; worst coordinate gap.
    Match(f64),
    /// Grid optimum on the boundary and the fit reported divergence.
    Diverged,
    Mismatch(String),
}

pub fn ln2_fixture() -> Fixture {
    Fixture { x: vec![vec![1.0], vec![0.0], vec![1.0]], times: vec![1.0, 2.0, 3.0], events: vec![true; 3] }
}

/// The z = 1 subject outlives everybody, so the likelihood increases
/// monotonically as beta goes to minus infinity.
pub fn separation_fixtures() -> Vec<Fixture> {
    vec![
        Fixture { x: vec![vec![0.0], vec![0.0], vec![0.0], vec![1.0]], times: vec![1.0, 2.0, 3.0, 4.0], events: vec![true; 4] },
        Fixture {
            x: vec![vec![1.0, 0.3], vec![1.0, -0.2], vec![0.0, 0.5], vec![0.0, 0.1], vec![0.0, -0.4]],
            times: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            events: vec![true, true, false, true, false],
        },
    ]
}

/// Random fixtures with 4-10 subjects, 1-2 covariates, integer times (ties
/// included) and some censoring.
pub fn random_fixtures(n: usize, seed: u64) -> Vec<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let m = rng.gen_range(4..=10);
            let p = rng.gen_range(1..=2);
            let x: Vec<Vec<f64>> = (0..m).map(|_| (0..p).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
            let times: Vec<f64> = (0..m).map(|_| rng.gen_range(1..=6) as f64).collect();
            let mut events: Vec<bool> = (0..m).map(|_| rng.gen::<f64>() < 0.7).collect();
            events[0] = true;
            Fixture { x, times, events }
        })
        .collect()
}

pub fn check(f: &Fixture) -> Outcome {
    let p = f.x[0].len();
    let x = Array2::from_shape_fn((f.x.len(), p), |(i, j)| f.x[i][j]);
    let data = SurvivalData { x: x.view(), times: &f.times, events: &f.events };
    let names: Vec<String> = (0..p).map(|j| format!("z{j}")).collect();
    let oracle = grid_argmax(p, GRID_RANGE, |b| breslow_loglik(&f.x, &f.times, &f.events, b));
    let on_boundary = oracle.iter().any(|b| b.abs() > GRID_RANGE - 0.5);
    match (cox_fit(&data, &names, &CoxConfig::default()), on_boundary) {
        (Ok(m), _) => {
            let gap = m.beta.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if gap < 1e-3 {
                Outcome::Match(gap)
            } else {
                Outcome::Mismatch(format!("beta {:?} vs grid {:?}", m.beta, oracle))
            }
        }
        (Err(FormError::CoxDivergence { .. }), true) => Outcome::Diverged,
        (r, _) => Outcome::Mismatch(format!("fit {r:?}, grid {oracle:?}")),
    }
}
