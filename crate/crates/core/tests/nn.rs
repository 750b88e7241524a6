use geodiff_core::nn::gradcheck::{check_layer, layer_suite, loss_suite};
use geodiff_core::nn::{mse, sgd_step, LayerSpec, LearningRates, Network, Parameterized, SgdConfig};
use geodiff_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn snapshot(net: &Network<f64>) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    net.visit_params(&mut |p| out.push(p.value.clone()));
    out
}

fn small_net(seed: u64) -> Network<f64> {
    let specs = vec![
        ("fc1".to_string(), LayerSpec::Dense { inputs: 4, outputs: 6 }),
        ("act".to_string(), LayerSpec::Relu),
        ("fc2".to_string(), LayerSpec::Dense { inputs: 6, outputs: 3 }),
        ("out".to_string(), LayerSpec::Softmax),
    ];
    Network::new(specs, "backbone", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn mse_of_unit_gap() {
    let a = Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap();
    let b = Tensor::zeros(&[2]);
    let (l, g) = mse(&a, &b).unwrap();
    assert_eq!(l, 1.0);
    assert_eq!(g.data(), &[1.0, 1.0]);
}

#[test]
fn sgd_without_gradient_or_decay_is_a_no_op() {
    let mut net = small_net(1);
    let before = snapshot(&net);
    net.zero_grad();
    let lrs = LearningRates::new([("backbone", 0.5)]);
    sgd_step(&mut net, &lrs, SgdConfig { momentum: 0.9, weight_decay: 0.0 }).unwrap();
    assert_eq!(snapshot(&net), before);
}

#[test]
fn every_layer_and_loss_passes_its_gradient_check() {
    let layers = layer_suite().into_iter().map(|(spec, shape)| check_layer(&spec, &shape, 3));
    for r in layers.chain(loss_suite(3)) {
        let r = r.unwrap();
        assert!(r.passed(), "{} max rel err {:e}", r.name, r.max_rel_err);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_outputs_are_distributions(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let net = small_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[5, 4], &mut rng).map(|v| v * scale);
        let p = net.infer(&x).unwrap();
        for row in p.data().chunks(3) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
