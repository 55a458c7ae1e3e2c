//! Labeled pilot datasets and plain-SGD training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use super::model::{ClassifierModel, InputScaler};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub values: Vec<f64>,
    pub label: usize,
    pub condition: usize,
    /// Index of the frame within its (device, condition) batch.
    pub index: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub n_classes: usize,
    pub n_conditions: usize,
    pub split_fraction: f64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Test)
    }

    pub fn test_samples(&self) -> Vec<&Sample> {
        self.test().collect()
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for s in self.samples.iter().filter(|s| s.split == split) {
            c[s.label] += 1;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        for (i, s) in self.samples.iter().enumerate() {
            if s.values.len() != n {
                return Err(Error::Shape(format!("sample {i} has {} values, expected {n}", s.values.len())));
            }
            if s.label >= self.n_classes {
                return Err(Error::InvalidArgument(format!("sample {i}: label {} out of range", s.label)));
            }
        }
        Ok(())
    }
}

/// Stratified split: within each class, a seeded shuffle sends
/// `round(fraction * count)` samples to the test set.
pub fn assign_splits(labels: &[usize], n_classes: usize, fraction: f64, seed: u64) -> Vec<Split> {
    let mut out = vec![Split::Train; labels.len()];
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let mut rng = rng_for(seed, "split", &[class as u64]);
        members.shuffle(&mut rng);
        let n_test = (fraction * members.len() as f64).round() as usize;
        for &i in &members[..n_test.min(members.len())] {
            out[i] = Split::Test;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 30, batch_size: 32, seed: 1 }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push("training.lr must be a positive finite number".into());
        }
        if self.batch_size == 0 {
            errs.push("training.batch_size must be > 0".into());
        }
        errs
    }
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy<'a>(model: &ClassifierModel, samples: impl IntoIterator<Item = &'a Sample>) -> Result<f64> {
    let mut n = 0usize;
    let mut hit = 0usize;
    for s in samples {
        n += 1;
        if model.predict(&s.values)? == s.label {
            hit += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

pub fn train(dataset: &Dataset, architecture: &Architecture, hyper: &TrainHyper) -> Result<ClassifierModel> {
    train_with_progress(dataset, architecture, hyper, |_, _| {})
}

/// Plain SGD (no momentum) on the mean softmax cross-entropy.
/// `on_epoch(epoch, mean_loss)` is called after every epoch.
pub fn train_with_progress(
    dataset: &Dataset,
    architecture: &Architecture,
    hyper: &TrainHyper,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<ClassifierModel> {
    dataset.validate()?;
    let errs = hyper.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if dataset.n_classes < 2 {
        return Err(Error::InvalidArgument("training needs at least two classes".into()));
    }
    if architecture.input_shape != dataset.shape {
        return Err(Error::Shape(format!(
            "architecture input {:?} does not match dataset samples {:?}",
            architecture.input_shape, dataset.shape
        )));
    }
    let n_out = architecture.n_classes()?;
    if n_out != dataset.n_classes {
        return Err(Error::Shape(format!("architecture has {n_out} outputs, dataset {} classes", dataset.n_classes)));
    }
    let train: Vec<&Sample> = dataset.train().collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }

    let mut model = ClassifierModel::init(architecture.clone(), hyper.seed)?;
    if architecture.standardize_input {
        let len = architecture.input_len();
        model.scaler = Some(InputScaler::fit(train.iter().map(|s| s.values.as_slice()), len));
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(hyper.seed, "shuffle", &[epoch as u64]));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| train[i].values.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let (loss, grads, _) = model.batch_gradients(&rows, &labels, false)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            total += loss * chunk.len() as f64;
            model.sgd_step(&grads, hyper.lr);
        }
        let mean = total / train.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }

    model.train_meta.epochs = hyper.epochs;
    model.train_meta.lr = hyper.lr;
    model.train_meta.batch_size = hyper.batch_size;
    model.train_meta.seed = hyper.seed;
    model.train_meta.epoch_losses = epoch_losses;
    model.train_meta.train_accuracy = accuracy(&model, train.iter().copied())?;
    model.train_meta.final_test_accuracy = accuracy(&model, dataset.test())?;
    Ok(model)
}
