use form::evalharness::roc_auc;
use form::nncore::{
    class_weights, predict_positive, read_sequential, train, write_sequential, LayerSpec, Sequential, TensorDataset,
    TrainConfig,
};
use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn separable(n: usize, seed: u64) -> TensorDataset<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    while items.len() < n {
        let (x, y): (f32, f32) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let margin = x + 0.5 * y;
        if margin.abs() < 0.1 {
            continue;
        }
        items.push(ArrayD::from_shape_vec(IxDyn(&[2]), vec![x, y]).unwrap());
        labels.push(usize::from(margin > 0.0));
    }
    TensorDataset { items, labels }
}

fn mlp(seed: u64) -> Sequential<f32> {
    let specs = [
        LayerSpec::FullyConnected { n_out: 16 },
        LayerSpec::ReLU,
        LayerSpec::FullyConnected { n_out: 2 },
        LayerSpec::Softmax,
    ];
    Sequential::new(&[2], &specs, seed).unwrap()
}

#[test]
fn separable_toy_reaches_high_auc() {
    let data = separable(200, 1);
    let mut net = mlp(3);
    let cfg = TrainConfig { epochs: 50, learning_rate: 1e-2, seed: 5, ..Default::default() };
    let report = train(&mut net, &data, None, &cfg).unwrap();
    let p = predict_positive(&mut net, &data, 64).unwrap();
    let y: Vec<bool> = data.labels.iter().map(|&l| l == 1).collect();
    let auc = roc_auc(&p, &y).unwrap();
    assert!(auc >= 0.99, "AUC {auc}");
    assert!(report.epochs.last().unwrap().train_auc.unwrap() >= 0.99);
}

#[test]
fn full_batch_loss_is_non_increasing() {
    let data = separable(40, 2);
    let mut net = mlp(4);
    let cfg = TrainConfig { epochs: 10, batch_size: 40, learning_rate: 1e-3, seed: 1, ..Default::default() };
    let r = train(&mut net, &data, None, &cfg).unwrap();
    let losses: Vec<f64> = r.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

#[test]
fn fixed_seed_gives_identical_weights() {
    let data = separable(60, 3);
    let cfg = TrainConfig { epochs: 3, learning_rate: 1e-2, seed: 9, ..Default::default() };
    let mut a = mlp(1);
    let mut b = mlp(1);
    train(&mut a, &data, Some(&data), &cfg).unwrap();
    train(&mut b, &data, Some(&data), &cfg).unwrap();
    assert_eq!(write_sequential(&a), write_sequential(&b));
}

#[test]
fn class_weight_example() {
    let labels: Vec<usize> = (0..100).map(|i| usize::from(i < 10)).collect();
    let w = class_weights(&labels, 2).unwrap();
    assert!((w[0] - 0.5556).abs() < 1e-4 && (w[1] - 5.0).abs() < 1e-12);
    assert!(class_weights(&[0, 0, 0], 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn serialization_round_trip(seed in any::<u64>(), hidden in 1usize..12, channels in 1usize..4) {
        let specs = [
            LayerSpec::Conv { channels_out: channels, kernel: 3, stride: 2 },
            LayerSpec::ReLU,
            LayerSpec::GlobalAveragePool,
            LayerSpec::FullyConnected { n_out: hidden },
            LayerSpec::Dropout { rate: 0.3 },
            LayerSpec::FullyConnected { n_out: 2 },
            LayerSpec::Softmax,
        ];
        let net = Sequential::<f32>::new(&[1, 6, 6], &specs, seed).unwrap();
        let bytes = write_sequential(&net);
        let back = read_sequential(&bytes).unwrap();
        prop_assert_eq!(back.specs(), net.specs());
        prop_assert_eq!(write_sequential(&back), bytes.clone());
        let mut corrupt = bytes;
        let mid = corrupt.len() / 2;
        corrupt[mid] ^= 0x40;
        prop_assert!(read_sequential(&corrupt).is_err());
    }
}
