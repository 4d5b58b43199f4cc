//! Central finite-difference oracle for network gradients (64-bit).

use form::nncore::{weighted_cross_entropy, Classifier, LayerSpec, Sequential};
use ndarray::{Array2, ArrayD, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;

/// Loss used for the check: weighted cross-entropy when the net ends in a
/// softmax, otherwise a fixed random projection of the output.
fn loss(net: &mut Sequential<f64>, x: &ArrayD<f64>, proj: &ArrayD<f64>, labels: &[usize], w: &[f64], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = net.forward(x, true, &mut rng).expect("forward");
    if net.ends_in_softmax() {
        let p: Array2<f64> = out.into_dimensionality::<Ix2>().unwrap();
        weighted_cross_entropy(&p, labels, w).0
    } else {
        (&out * proj).sum()
    }
}

/// Worst per-tensor relative error `|a - n| / max(|a| + |n|, 1e-7)` (norms
/// over the tensor) across parameters and the input gradient.
pub fn max_relative_error(net: &mut Sequential<f64>, x: &ArrayD<f64>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let out_dims = net.output_dims().to_vec();
    let n = x.shape()[0];
    let mut proj_shape = vec![n];
    proj_shape.extend_from_slice(&out_dims);
    let proj = ArrayD::from_shape_simple_fn(IxDyn(&proj_shape), || rng.gen_range(-1.0..1.0));
    let k = out_dims.iter().product::<usize>();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();

    // analytic
    let mut fwd_rng = ChaCha8Rng::seed_from_u64(seed);
    let out = net.forward(x, true, &mut fwd_rng).expect("forward");
    let dx = if net.ends_in_softmax() {
        let p: Array2<f64> = out.into_dimensionality::<Ix2>().unwrap();
        let (_, g) = weighted_cross_entropy(&p, &labels, &w);
        // through the generic softmax backward, not the fused shortcut
        let mut dp = Array2::<f64>::zeros(p.raw_dim());
        for i in 0..n {
            dp[[i, labels[i]]] = -w[i] / (n as f64 * p[[i, labels[i]]]);
        }
        let via_generic = net.backward(dp.into_dyn()).unwrap();
        let analytic_params: Vec<ArrayD<f64>> = net.params().iter().map(|p| p.grad.clone().unwrap()).collect();
        // fused path must agree with the generic path
        net.forward(x, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        Classifier::backward_logits(net, g).unwrap();
        for (a, p) in analytic_params.iter().zip(net.params()) {
            let diff = (a - p.grad.as_ref().unwrap()).mapv(f64::abs).sum();
            assert!(diff < 1e-10 * (1.0 + a.mapv(f64::abs).sum()), "fused softmax/CE gradient disagrees");
        }
        via_generic
    } else {
        net.backward(proj.clone()).unwrap()
    };
    let analytic: Vec<ArrayD<f64>> = net.params().iter().map(|p| p.grad.clone().unwrap()).collect();

    let mut worst: f64 = 0.0;
    let rel = |a: &ArrayD<f64>, nfd: &ArrayD<f64>| {
        let d = (a - nfd).mapv(|v| v * v).sum().sqrt();
        let s = a.mapv(|v| v * v).sum().sqrt() + nfd.mapv(|v| v * v).sum().sqrt();
        d / s.max(1e-7)
    };
    let n_params = analytic.len();
    for pi in 0..n_params {
        let len = net.params()[pi].value.len();
        let mut numeric = ArrayD::<f64>::zeros(net.params()[pi].value.raw_dim());
        for e in 0..len {
            let orig = net.params()[pi].value.as_slice().unwrap()[e];
            net.params_mut()[pi].value.as_slice_mut().unwrap()[e] = orig + EPS;
            let lp = loss(net, x, &proj, &labels, &w, seed);
            net.params_mut()[pi].value.as_slice_mut().unwrap()[e] = orig - EPS;
            let lm = loss(net, x, &proj, &labels, &w, seed);
            net.params_mut()[pi].value.as_slice_mut().unwrap()[e] = orig;
            numeric.as_slice_mut().unwrap()[e] = (lp - lm) / (2.0 * EPS);
        }
        worst = worst.max(rel(&analytic[pi], &numeric));
    }
    let mut xs = x.clone();
    let mut numeric = ArrayD::<f64>::zeros(x.raw_dim());
    for e in 0..x.len() {
        let orig = xs.as_slice().unwrap()[e];
        xs.as_slice_mut().unwrap()[e] = orig + EPS;
        let lp = loss(net, &xs, &proj, &labels, &w, seed);
        xs.as_slice_mut().unwrap()[e] = orig - EPS;
        let lm = loss(net, &xs, &proj, &labels, &w, seed);
        xs.as_slice_mut().unwrap()[e] = orig;
        numeric.as_slice_mut().unwrap()[e] = (lp - lm) / (2.0 * EPS);
    }
    worst.max(rel(&dx, &numeric))
}

/// A randomized small network exercising every layer type; `trial` picks the
/// architecture family.
pub fn random_net(trial: u64) -> (Sequential<f64>, ArrayD<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
    let n = rng.gen_range(1..=3);
    let (input, specs): (Vec<usize>, Vec<LayerSpec>) = match trial % 4 {
        0 => {
            let c = rng.gen_range(1..=2);
            let h = rng.gen_range(4..=7);
            let k = [1, 3, 5][rng.gen_range(0..3)];
            (
                vec![c, h, h + 1],
                vec![
                    LayerSpec::Conv { channels_out: rng.gen_range(1..=3), kernel: k, stride: rng.gen_range(1..=2) },
                    LayerSpec::ReLU,
                    LayerSpec::Conv { channels_out: rng.gen_range(2..=3), kernel: 3, stride: 1 },
                    LayerSpec::GlobalAveragePool,
                    LayerSpec::FullyConnected { n_out: 4 },
                    LayerSpec::Dropout { rate: 0.5 },
                    LayerSpec::FullyConnected { n_out: 2 },
                    LayerSpec::Softmax,
                ],
            )
        }
        1 => (
            vec![rng.gen_range(2..=6)],
            vec![
                LayerSpec::FullyConnected { n_out: rng.gen_range(2..=6) },
                LayerSpec::ReLU,
                LayerSpec::Dropout { rate: 0.3 },
                LayerSpec::FullyConnected { n_out: 3 },
                LayerSpec::Softmax,
            ],
        ),
        2 => (
            vec![1, 4, 4],
            vec![
                LayerSpec::Conv { channels_out: 2, kernel: 3, stride: 2 },
                LayerSpec::Upsample { factor: 2 },
                LayerSpec::Conv { channels_out: 2, kernel: 3, stride: 1 },
            ],
        ),
        _ => (
            vec![2, 3, 3],
            vec![LayerSpec::FullyConnected { n_out: 3 }, LayerSpec::ReLU, LayerSpec::FullyConnected { n_out: 2 }],
        ),
    };
    let net = Sequential::<f64>::new(&input, &specs, trial).unwrap();
    let mut shape = vec![n];
    shape.extend_from_slice(&input);
    let x = ArrayD::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(-1.0..1.0));
    (net, x)
}
