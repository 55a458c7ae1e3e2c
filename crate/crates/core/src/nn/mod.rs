//! Minimal reverse-mode CNN core and the fingerprint classifier.

pub mod arch;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;

pub use arch::{Architecture, LayerSpec, Padding};
pub use model::{argmax, cross_entropy, loss_ce, softmax, ClassifierModel, Gradients, InputScaler, LayerParams, TrainMeta};
pub use tensor::Tensor;
pub use train::{accuracy, assign_splits, train, train_with_progress, Dataset, Sample, Split, TrainHyper};
