//! Experiment configuration: every knob of a run in one JSON document.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::attack::PerturbationConfig;
use crate::channel::{ChannelModel, Correlation};
use crate::device::{default_profiles, DeviceProfile};
use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::nn::{Architecture, TrainHyper};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub conditions: usize,
    pub samples_per_condition: usize,
    pub split_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { conditions: 10, samples_per_condition: 200, split_fraction: 0.2 }
    }
}

/// Receiver and link-scoring settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub blocks_per_frame: usize,
    pub max_retx: usize,
    /// Test frames scored per evaluation cell.
    pub frames_per_cell: usize,
    pub correlation: Correlation,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self { blocks_per_frame: 10, max_retx: 4, frames_per_cell: 200, correlation: Correlation::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub ratios: Vec<f64>,
    pub budgets: Vec<f64>,
    /// Budgets of the link degradation curve (ratio 1.0, power cap ignored).
    pub degradation_budgets: Vec<f64>,
    pub ablation_budgets: Vec<f64>,
    pub ablation_seeds: usize,
    /// Seed of the substitute model that generates transfer perturbations.
    pub transfer_seed: u64,
    pub export_features: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            ratios: (1..=10).map(|i| i as f64 / 10.0).collect(),
            budgets: vec![0.005, 0.01, 0.02, 0.03, 0.04],
            degradation_budgets: vec![0.0, 0.02, 0.04, 0.06, 0.08, 0.10, 0.12, 0.14, 0.16, 0.20, 0.24, 0.28],
            ablation_budgets: vec![0.01, 0.02, 0.03, 0.04],
            ablation_seeds: 5,
            transfer_seed: 2,
            export_features: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub devices: Vec<DeviceProfile>,
    pub channel: ChannelModel,
    pub dataset: DatasetSpec,
    pub architecture: Architecture,
    pub training: TrainHyper,
    pub attack: PerturbationConfig,
    pub link: LinkConfig,
    pub sweep: SweepSpec,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let grid = GridConfig::default();
        let devices = default_profiles();
        let architecture = Architecture::default_for(grid.tensor_shape(), devices.len());
        Self {
            grid,
            devices,
            channel: ChannelModel::default(),
            dataset: DatasetSpec::default(),
            architecture,
            training: TrainHyper::default(),
            attack: PerturbationConfig::default(),
            link: LinkConfig::default(),
            sweep: SweepSpec::default(),
            output_dir: PathBuf::from("out"),
            master_seed: 20_231_016,
        }
    }
}

/// Seeds of every stage, all derived from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub frames: u64,
    pub drift: u64,
    pub channel: u64,
    pub split: u64,
    pub training: u64,
    pub attack: u64,
    pub transfer_training: u64,
}

impl ExperimentConfig {
    /// Default configuration at the full 1000-samples-per-condition scale.
    pub fn full_scale() -> Self {
        Self { dataset: DatasetSpec { samples_per_condition: 1000, ..DatasetSpec::default() }, ..Self::default() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "full_scale" => Ok(Self::full_scale()),
            other => Err(Error::Config(vec![format!("unknown preset '{other}' (expected default or full_scale)")])),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n_classes(&self) -> usize {
        self.devices.len()
    }

    /// Every violated constraint, one message per field.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.grid.validate();
        if self.devices.len() < 2 {
            errs.push(format!("devices: need at least 2 devices, got {}", self.devices.len()));
        }
        for (i, d) in self.devices.iter().enumerate() {
            if d.device_id != i {
                errs.push(format!("devices[{i}].device_id must equal its position {i}, got {}", d.device_id));
            }
            errs.extend(d.validate());
        }
        errs.extend(self.channel.validate());
        if self.dataset.conditions == 0 {
            errs.push("dataset.conditions must be > 0".into());
        }
        if self.dataset.samples_per_condition == 0 {
            errs.push("dataset.samples_per_condition must be > 0".into());
        }
        if !(self.dataset.split_fraction > 0.0 && self.dataset.split_fraction < 1.0) {
            errs.push("dataset.split_fraction must lie in (0, 1)".into());
        }
        if self.grid.validate().is_empty() && self.architecture.input_shape != self.grid.tensor_shape() {
            errs.push(format!(
                "architecture.input_shape {:?} must equal the pilot tensor shape {:?}",
                self.architecture.input_shape,
                self.grid.tensor_shape()
            ));
        }
        errs.extend(self.architecture.validate(self.devices.len()));
        errs.extend(self.training.validate());
        errs.extend(self.attack.validate(self.devices.len()));
        if self.link.blocks_per_frame == 0 {
            errs.push("link.blocks_per_frame must be > 0".into());
        }
        let c = self.link.correlation;
        if !(c.rho_f > 0.0 && c.rho_f < 1.0) || !(c.rho_t > 0.0 && c.rho_t < 1.0) {
            errs.push("link.correlation: rho_f and rho_t must lie in (0, 1)".into());
        }
        let s = &self.sweep;
        if s.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            errs.push("sweep.ratios must lie in (0, 1]".into());
        }
        for (name, list) in [("budgets", &s.budgets), ("degradation_budgets", &s.degradation_budgets), ("ablation_budgets", &s.ablation_budgets)] {
            if list.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
                errs.push(format!("sweep.{name} must be finite and >= 0"));
            }
        }
        if s.degradation_budgets.windows(2).any(|w| w[0] > w[1]) {
            errs.push("sweep.degradation_budgets must be sorted ascending".into());
        }
        if s.ablation_seeds < 5 {
            errs.push("sweep.ablation_seeds must be >= 5".into());
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn seeds(&self) -> StageSeeds {
        let m = self.master_seed;
        StageSeeds {
            frames: derive_seed(m, "frames", &[]),
            drift: derive_seed(m, "drift", &[]),
            channel: derive_seed(m, "channel", &[self.channel.seed]),
            split: derive_seed(m, "split", &[]),
            training: derive_seed(m, "training", &[self.training.seed]),
            attack: derive_seed(m, "attack", &[self.attack.seed]),
            transfer_training: derive_seed(m, "training", &[self.sweep.transfer_seed]),
        }
    }

    /// Training hyperparameters with the stage seed filled in.
    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper { seed: self.seeds().training, ..self.training.clone() }
    }

    pub fn transfer_hyper(&self) -> TrainHyper {
        TrainHyper { seed: self.seeds().transfer_training, ..self.training.clone() }
    }
}
