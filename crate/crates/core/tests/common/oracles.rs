//! Brute-force reference implementations used as test oracles.

/// Exhaustive pairwise concordance: `(concordant + 0.5 * tied) / pairs`.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Welch statistic from the textbook formulas; `p` is two-sided and computed
/// by integrating the Student-t density with Simpson's rule.
pub fn welch_closed_form(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    (t, df, 1.0 - 2.0 * t_central_mass(t.abs(), df))
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let mut s = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        s += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

/// `P(0 < T < x)` for Student-t with `df` degrees of freedom.
fn t_central_mass(x: f64, df: f64) -> f64 {
    let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
    let f = |u: f64| c * (1.0 + u * u / df).powf(-(df + 1.0) / 2.0);
    let n = 20_000;
    let h = x / n as f64;
    let mut s = f(0.0) + f(x);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Breslow log partial likelihood written directly from its definition.
pub fn breslow_loglik(x: &[Vec<f64>], times: &[f64], events: &[bool], beta: &[f64]) -> f64 {
    let eta: Vec<f64> = x.iter().map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let mut ll = 0.0;
    for i in 0..x.len() {
        if !events[i] {
            continue;
        }
        let risk: f64 = (0..x.len()).filter(|&j| times[j] >= times[i]).map(|j| eta[j].exp()).sum();
        ll += eta[i] - risk.ln();
    }
    ll
}

/// Maximizer of `f` over `[-range, range]^dim` by a dense grid followed by
/// successively finer grids centred on the incumbent.
pub fn grid_argmax(dim: usize, range: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut centre = vec![0.0; dim];
    let mut half = range;
    let steps = if dim == 1 { 400 } else { 80 };
    let mut best = (f64::NEG_INFINITY, centre.clone());
    for _ in 0..12 {
        let h = 2.0 * half / steps as f64;
        let mut idx = vec![0usize; dim];
        loop {
            let p: Vec<f64> = idx.iter().zip(&centre).map(|(&i, c)| c - half + i as f64 * h).collect();
            let v = f(&p);
            if v > best.0 {
                best = (v, p);
            }
            let mut d = 0;
            while d < dim {
                idx[d] += 1;
                if idx[d] <= steps {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == dim {
                break;
            }
        }
        centre = best.1.clone();
        half = 4.0 * h;
    }
    best.1
}
