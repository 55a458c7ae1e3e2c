//! Analytic gradients against central finite differences on random tiny
//! networks, for both parameters and inputs.

mod common;

use common::{finite_difference_sweep, random_architecture};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rferase::nn::{Architecture, ClassifierModel, LayerSpec, Padding, Tensor};

#[test]
fn gradients_match_finite_differences_on_random_models() {
    let r = finite_difference_sweep(120);
    assert!(r.failures.is_empty(), "{} mismatches:\n{}", r.failures.len(), r.failures.join("\n"));
    assert!(r.kinks * 200 < r.checked, "{} of {} entries sat on a kink", r.kinks, r.checked);
    assert!(r.checked > 5000);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let logits: Vec<f64> = (0..rng.random_range(2..8)).map(|_| rng.random_range(-50.0..50.0)).collect();
        let p = rferase::nn::softmax(&logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn duplicated_batch_keeps_mean_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let arch = random_architecture(&mut rng);
    let model = ClassifierModel::init(arch.clone(), 4).unwrap();
    let n = model.input_len();
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut shape1 = vec![1];
    shape1.extend_from_slice(&arch.input_shape);
    let mut shape2 = vec![2];
    shape2.extend_from_slice(&arch.input_shape);
    let one = Tensor::new(shape1, x.clone()).unwrap();
    let two = Tensor::new(shape2, [x.clone(), x].concat()).unwrap();
    let (g1, _) = model.backward(&one, &[1]).unwrap();
    let (g2, _) = model.backward(&two, &[1, 1]).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        for (u, v) in a.weight.iter().zip(&b.weight).chain(a.bias.iter().zip(&b.bias)) {
            assert!((u - v).abs() <= 1e-15 * u.abs().max(1.0));
        }
    }
}

#[test]
fn zero_weight_model_gives_bias_only_logits() {
    let arch = Architecture {
        input_shape: [1, 3, 2],
        layers: vec![
            LayerSpec::Conv { out_channels: 2, kernel: [2, 1], padding: Padding::Same },
            LayerSpec::Relu,
            LayerSpec::Dense { width: 3 },
        ],
        standardize_input: false,
    };
    let mut model = ClassifierModel::init(arch, 1).unwrap();
    let zeros = vec![0.0; model.param_count()];
    model.set_flat_params(&zeros).unwrap();
    model.params.last_mut().unwrap().bias = vec![0.5, -1.0, 2.0];
    let logits = model.logits(&[1.0, -2.0, 3.0, 0.5, 0.25, -7.0]).unwrap();
    assert_eq!(logits, vec![0.5, -1.0, 2.0]);
}

#[test]
fn single_unit_conv_doubles_the_input_path() {
    // 1x1 conv with weight 2 feeding a dense layer of ones: logit = 2 * sum(x).
    let arch = Architecture {
        input_shape: [1, 2, 2],
        layers: vec![LayerSpec::Conv { out_channels: 1, kernel: [1, 1], padding: Padding::Valid }, LayerSpec::Dense { width: 1 }],
        standardize_input: false,
    };
    let mut model = ClassifierModel::init(arch, 1).unwrap();
    model.params[0].weight = vec![2.0];
    model.params[0].bias = vec![0.0];
    model.params[1].weight = vec![1.0; 4];
    model.params[1].bias = vec![0.0];
    let x = [0.5, -1.5, 2.0, 0.25];
    assert_eq!(model.logits(&x).unwrap(), vec![2.0 * x.iter().sum::<f64>()]);
}
