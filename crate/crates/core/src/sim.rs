//! Frame synthesis and the receive chain for one experiment setup.
//!
//! Every frame is addressed by `(device, condition, index)` and regenerated
//! on demand from the stage seeds, so datasets, attacks and link runs all
//! see the same transmissions without storing full grids.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::attack::{inject_pre_channel, Injection, Perturbation};
use crate::channel::{equalize, estimate_ls, propagate, demodulate_and_score, ChannelModel, LinkStats, MmseEstimator, Propagation};
use crate::config::{ExperimentConfig, LinkConfig, StageSeeds};
use crate::device::{impair, ConditionContext, DeviceProfile};
use crate::error::{Error, Result};
use crate::grid::{build_frame, extract_pilots, pilot_positions, random_bits, GridConfig, PilotTensor, Position, ResourceGrid};
use crate::nn::{assign_splits, Dataset, Sample, Split};
use crate::seed::derive_seed;

/// Frame-index offset separating retransmission attempts of one frame.
const RETX_STRIDE: u64 = 1 << 40;

/// One transmitted frame after the device impairments.
#[derive(Debug, Clone)]
pub struct Transmission {
    pub frame_index: u64,
    pub bits: Vec<u8>,
    pub impaired: ResourceGrid,
}

pub struct Simulator {
    pub grid: GridConfig,
    pub devices: Vec<DeviceProfile>,
    pub channel: ChannelModel,
    pub link: LinkConfig,
    pub conditions: usize,
    pub samples_per_condition: usize,
    pub split_fraction: f64,
    pub seeds: StageSeeds,
    pilot_seq: Vec<Complex64>,
    positions: Vec<Position>,
    estimator: MmseEstimator,
}

impl Simulator {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.check()?;
        let seeds = config.seeds();
        let channel = ChannelModel { seed: seeds.channel, ..config.channel.clone() };
        let estimator = MmseEstimator::new(&config.grid, channel.noise_var(), config.link.correlation)?;
        Ok(Self {
            grid: config.grid.clone(),
            devices: config.devices.clone(),
            channel,
            link: config.link.clone(),
            conditions: config.dataset.conditions,
            samples_per_condition: config.dataset.samples_per_condition,
            split_fraction: config.dataset.split_fraction,
            seeds,
            pilot_seq: config.grid.pilot_sequence(),
            positions: pilot_positions(&config.grid),
            estimator,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.devices.len()
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn pilot_sequence(&self) -> &[Complex64] {
        &self.pilot_seq
    }

    pub fn estimator(&self) -> &MmseEstimator {
        &self.estimator
    }

    /// Global frame number `(d * C + c) * N + i`.
    pub fn frame_index(&self, device: usize, condition: usize, index: usize) -> u64 {
        ((device * self.conditions + condition) * self.samples_per_condition + index) as u64
    }

    pub fn transmit(&self, device: usize, condition: usize, index: usize) -> Result<Transmission> {
        let profile = self
            .devices
            .get(device)
            .ok_or_else(|| Error::InvalidArgument(format!("no device {device}")))?;
        let frame_index = self.frame_index(device, condition, index);
        let bits = random_bits(derive_seed(self.seeds.frames, "data", &[frame_index]), 2 * self.grid.n_data_cells());
        let tx = build_frame(&self.grid, &self.pilot_seq, &bits, frame_index)?;
        let ctx = ConditionContext { condition_id: condition, drift_seed: self.seeds.drift };
        Ok(Transmission { frame_index, bits, impaired: impair(&tx, profile, &ctx) })
    }

    /// Over-the-air observation of `tx`; `attempt > 0` draws fresh noise
    /// (and fresh taps under block fading) for a retransmission.
    pub fn observe(&self, tx: &Transmission, attempt: usize, pre_channel: Option<&Perturbation>) -> Result<Propagation> {
        let grid = match pre_channel {
            Some(p) => inject_pre_channel(&tx.impaired, p, &self.positions)?,
            None => tx.impaired.clone(),
        };
        Ok(propagate(&grid, &self.channel, tx.frame_index + attempt as u64 * RETX_STRIDE))
    }

    pub fn pilots(&self, received: &ResourceGrid, label: usize, condition: usize) -> Result<PilotTensor> {
        extract_pilots(received, &self.grid, label, condition)
    }

    /// Dataset sample as a labeled pilot tensor.
    pub fn pilots_of(&self, sample: &Sample) -> PilotTensor {
        PilotTensor {
            shape: self.grid.tensor_shape(),
            values: sample.values.clone(),
            device_label: sample.label,
            condition_id: sample.condition,
        }
    }

    /// Clean pilot observation of one frame.
    pub fn sample(&self, device: usize, condition: usize, index: usize) -> Result<PilotTensor> {
        let tx = self.transmit(device, condition, index)?;
        let rx = self.observe(&tx, 0, None)?;
        self.pilots(&rx.received, device, condition)
    }

    /// Pilot observation with a perturbation injected at either point.
    pub fn perturbed_sample(&self, sample: &Sample, delta: &Perturbation, injection: Injection) -> Result<Vec<f64>> {
        match injection {
            Injection::PostChannel => {
                if delta.delta.len() != sample.values.len() {
                    return Err(Error::Shape("perturbation does not match sample".into()));
                }
                Ok(sample.values.iter().zip(&delta.delta).map(|(v, d)| v + d).collect())
            }
            Injection::PreChannel => {
                let tx = self.transmit(sample.label, sample.condition, sample.index)?;
                let rx = self.observe(&tx, 0, Some(delta))?;
                Ok(self.pilots(&rx.received, sample.label, sample.condition)?.values)
            }
        }
    }

    /// Labeled pilot dataset for every (device, condition, index), with a
    /// stratified train/test split.
    pub fn generate_dataset(&self) -> Result<Dataset> {
        let ids: Vec<(usize, usize, usize)> = (0..self.devices.len())
            .flat_map(|d| (0..self.conditions).flat_map(move |c| (0..self.samples_per_condition).map(move |i| (d, c, i))))
            .collect();
        let mut samples: Vec<Sample> = ids
            .par_iter()
            .map(|&(d, c, i)| {
                let t = self.sample(d, c, i)?;
                Ok(Sample { values: t.values, label: d, condition: c, index: i, split: Split::Train })
            })
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        for (s, split) in samples.iter_mut().zip(assign_splits(&labels, self.n_classes(), self.split_fraction, self.seeds.split)) {
            s.split = split;
        }
        Ok(Dataset {
            shape: self.grid.tensor_shape(),
            n_classes: self.n_classes(),
            n_conditions: self.conditions,
            split_fraction: self.split_fraction,
            samples,
        })
    }

    /// Receiver chain on one observation: LS at the pilots (with an optional
    /// post-channel perturbation on them), MMSE, zero-forcing equalization.
    fn receive(&self, rx: &Propagation, post_channel: Option<&Perturbation>) -> Result<crate::channel::Equalized> {
        let mut received = rx.received.clone();
        if let Some(p) = post_channel {
            received = inject_pre_channel(&received, p, &self.positions)?;
        }
        let ls = estimate_ls(&received, &self.pilot_seq, &self.positions)?;
        let est = self.estimator.estimate(&ls)?;
        equalize(&received, &est)
    }

    /// Link statistics of one frame carrying the given perturbation. The same
    /// perturbation rides on every retransmission attempt.
    pub fn link(&self, device: usize, condition: usize, index: usize, delta: Option<(&Perturbation, Injection)>) -> Result<LinkStats> {
        let tx = self.transmit(device, condition, index)?;
        let (pre, post) = match delta {
            Some((p, Injection::PreChannel)) => (Some(p), None),
            Some((p, Injection::PostChannel)) => (None, Some(p)),
            None => (None, None),
        };
        let first = self.receive(&self.observe(&tx, 0, pre)?, post)?;
        demodulate_and_score(&first, &tx.bits, self.link.blocks_per_frame, self.link.max_retx, |attempt| {
            self.receive(&self.observe(&tx, attempt, pre)?, post)
        })
    }
}
