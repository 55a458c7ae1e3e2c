//! Link-level OFDM simulator and adversarial pilot-perturbation toolkit.
//!
//! Device-impaired pilot signals are fingerprinted by a small CNN, then
//! protected with gradient-sign perturbations (dense and power-controlled
//! sparse) while the receiver keeps estimating the channel from the same
//! pilots. The pipeline:
//!
//! ```text
//! grid::build_frame -> device::impair -> [attack pre-channel] -> channel::propagate
//!     -> grid::extract_pilots -> [attack post-channel] -> nn::ClassifierModel::predict
//!     -> channel::{estimate, equalize, demodulate_and_score}
//! ```

pub mod attack;
pub mod channel;
pub mod cli;
pub mod config;
pub mod device;
pub mod error;
pub mod eval;
pub mod grid;
pub mod manifest;
pub mod nn;
pub mod seed;
pub mod sim;

pub use error::{Error, Result};
pub use num_complex::Complex64;
