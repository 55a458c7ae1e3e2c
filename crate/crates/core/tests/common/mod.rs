//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rferase::nn::{loss_ce, Architecture, ClassifierModel, InputScaler, LayerSpec, Padding, Tensor};

pub const STEP: f64 = 1e-5;
const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-8;

/// A random stack of conv/relu/pool layers ending in one or two dense layers.
pub fn random_architecture(rng: &mut ChaCha8Rng) -> Architecture {
    let c = rng.random_range(1..=2);
    let mut shape = [c, rng.random_range(2..=6), rng.random_range(1..=4)];
    let input_shape = shape;
    let mut layers = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let kh = rng.random_range(1..=3.min(shape[1]));
        let kw = rng.random_range(1..=2.min(shape[2]));
        let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        let out_channels = rng.random_range(1..=3);
        layers.push(LayerSpec::Conv { out_channels, kernel: [kh, kw], padding });
        shape = match padding {
            Padding::Same => [out_channels, shape[1], shape[2]],
            Padding::Valid => [out_channels, shape[1] - kh + 1, shape[2] - kw + 1],
        };
        if rng.random_bool(0.7) {
            layers.push(LayerSpec::Relu);
        }
        if shape[1] >= 2 && rng.random_bool(0.5) {
            let pw = if shape[2] >= 2 && rng.random_bool(0.5) { 2 } else { 1 };
            layers.push(LayerSpec::MaxPool { pool: [2, pw] });
            shape = [shape[0], shape[1] / 2, shape[2] / pw];
        }
    }
    if rng.random_bool(0.5) {
        layers.push(LayerSpec::Dense { width: rng.random_range(2..=4) });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense { width: rng.random_range(2..=4) });
    Architecture { input_shape, layers, standardize_input: false }
}

fn batch_loss(model: &ClassifierModel, batch: &Tensor, labels: &[usize]) -> f64 {
    loss_ce(&model.forward(batch).unwrap(), labels).unwrap()
}

/// Outcome of comparing one analytic entry against finite differences.
enum Check {
    Match,
    /// The one-sided slopes disagree: a ReLU or pooling switch lies inside
    /// the step, so the central difference is not a derivative there.
    Kink,
    Mismatch(f64, f64),
}

fn compare(analytic: f64, f: impl Fn(f64) -> f64) -> Check {
    let f0 = f(0.0);
    let fp = f(STEP);
    let fm = f(-STEP);
    let central = (fp - fm) / (2.0 * STEP);
    let tol = (RTOL * analytic.abs().max(central.abs())).max(ATOL);
    if (analytic - central).abs() <= tol {
        return Check::Match;
    }
    let forward = (fp - f0) / STEP;
    let backward = (f0 - fm) / STEP;
    if (forward - backward).abs() > 1e3 * tol {
        Check::Kink
    } else {
        Check::Mismatch(analytic, central)
    }
}

/// Tally of one finite-difference sweep.
pub struct OracleReport {
    pub configs: u64,
    pub checked: usize,
    pub kinks: usize,
    pub failures: Vec<String>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.kinks * 200 < self.checked && self.configs >= 100
    }
}

/// Compare every parameter and input gradient of `n_configs` random tiny
/// models against central differences.
pub fn finite_difference_sweep(n_configs: u64) -> OracleReport {
    let mut checked = 0usize;
    let mut kinks = 0usize;
    let mut failures = Vec::new();
    for cfg in 0..n_configs {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + cfg);
        let arch = random_architecture(&mut rng);
        let mut model = ClassifierModel::init(arch.clone(), cfg).unwrap();
        let n = model.input_len();
        if rng.random_bool(0.3) {
            model.scaler = Some(InputScaler {
                mean: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
                inv_std: (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
            });
        }
        // Random non-zero biases so ReLU units sit away from their kinks.
        let mut flat = model.flat_params();
        flat.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
        model.set_flat_params(&flat).unwrap();

        let b = rng.random_range(1..=3);
        let classes = model.n_classes();
        let data: Vec<f64> = (0..b * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut shape = vec![b];
        shape.extend_from_slice(&arch.input_shape);
        let batch = Tensor::new(shape, data).unwrap();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();

        let (grads, dx) = model.backward(&batch, &labels).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|p| p.weight.iter().chain(&p.bias).copied()).collect();

        for (i, &a) in analytic.iter().enumerate() {
            let outcome = compare(a, |h| {
                let mut m = model.clone();
                let mut p = flat.clone();
                p[i] += h;
                m.set_flat_params(&p).unwrap();
                batch_loss(&m, &batch, &labels)
            });
            checked += 1;
            match outcome {
                Check::Match => {}
                Check::Kink => kinks += 1,
                Check::Mismatch(a, c) => failures.push(format!("config {cfg} param {i}: analytic {a:e} vs numeric {c:e}")),
            }
        }
        for (i, &a) in dx.data.iter().enumerate() {
            let outcome = compare(a, |h| {
                let mut x = batch.clone();
                x.data[i] += h;
                batch_loss(&model, &x, &labels)
            });
            checked += 1;
            match outcome {
                Check::Match => {}
                Check::Kink => kinks += 1,
                Check::Mismatch(a, c) => failures.push(format!("config {cfg} input {i}: analytic {a:e} vs numeric {c:e}")),
            }
        }
    }
    OracleReport { configs: n_configs, checked, kinks, failures }
}
