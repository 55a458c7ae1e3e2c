//! Versioned binary formats for model checkpoints and pilot datasets.
//!
//! Both files share one layout:
//!
//! ```text
//! magic (8 bytes) | version: u32 LE | header_len: u64 LE | header (JSON) | payload
//! ```
//!
//! Checkpoint payload: trainable parameters as f64 LE (layer order, weights
//! then biases), followed by the input scaler's means and inverse stds when
//! `has_scaler` is set.
//!
//! Dataset payload: `n_samples x prod(shape)` f64 LE values, then per-sample
//! labels (u32 LE), condition ids (u32 LE), frame indices (u32 LE) and split
//! flags (u8, 0 = train, 1 = test).

use serde::{Deserialize, Serialize};
use std::path::Path;

use super::arch::Architecture;
use super::model::{ClassifierModel, InputScaler, LayerParams, TrainMeta};
use super::train::{Dataset, Sample, Split};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RFECKPT\0";
pub const DATASET_MAGIC: &[u8; 8] = b"RFEDATA\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    architecture: Architecture,
    train_meta: TrainMeta,
    param_count: usize,
    has_scaler: bool,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    shape: [usize; 3],
    n_classes: usize,
    n_conditions: usize,
    n_samples: usize,
    split_fraction: f64,
}

fn write_frame(magic: &[u8; 8], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<&'a [u8]> {
        if self.take(8)? != magic {
            return Err(Error::Format("bad magic".into()));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {v}")));
        }
        let len = self.u64()? as usize;
        self.take(len)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn push_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &ClassifierModel) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        architecture: model.architecture.clone(),
        train_meta: model.train_meta.clone(),
        param_count: model.param_count(),
        has_scaler: model.scaler.is_some(),
    };
    let mut payload = Vec::new();
    push_f64s(&mut payload, &model.flat_params());
    if let Some(s) = &model.scaler {
        push_f64s(&mut payload, &s.mean);
        push_f64s(&mut payload, &s.inv_std);
    }
    Ok(write_frame(CHECKPOINT_MAGIC, &serde_json::to_vec(&header)?, &payload))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ClassifierModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header: CheckpointHeader = serde_json::from_slice(r.header(CHECKPOINT_MAGIC)?)?;
    let flat = r.f64s(header.param_count)?;
    let scaler = if header.has_scaler {
        let n = header.architecture.input_len();
        Some(InputScaler { mean: r.f64s(n)?, inv_std: r.f64s(n)? })
    } else {
        None
    };
    r.finish()?;
    let template = ClassifierModel::init(header.architecture.clone(), 0)?;
    let params: Vec<LayerParams> = template.params.iter().map(|p| LayerParams { weight: vec![0.0; p.weight.len()], bias: vec![0.0; p.bias.len()] }).collect();
    let mut model = ClassifierModel::from_parts(header.architecture, params, scaler, header.train_meta)?;
    model.set_flat_params(&flat)?;
    Ok(model)
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let header = DatasetHeader {
        shape: ds.shape,
        n_classes: ds.n_classes,
        n_conditions: ds.n_conditions,
        n_samples: ds.samples.len(),
        split_fraction: ds.split_fraction,
    };
    let n = ds.samples.len();
    let mut payload = Vec::with_capacity(n * (8 * ds.shape.iter().product::<usize>() + 13));
    for s in &ds.samples {
        push_f64s(&mut payload, &s.values);
    }
    for s in &ds.samples {
        payload.extend_from_slice(&(s.label as u32).to_le_bytes());
    }
    for s in &ds.samples {
        payload.extend_from_slice(&(s.condition as u32).to_le_bytes());
    }
    for s in &ds.samples {
        payload.extend_from_slice(&(s.index as u32).to_le_bytes());
    }
    for s in &ds.samples {
        payload.push(u8::from(s.split == Split::Test));
    }
    Ok(write_frame(DATASET_MAGIC, &serde_json::to_vec(&header)?, &payload))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let h: DatasetHeader = serde_json::from_slice(r.header(DATASET_MAGIC)?)?;
    let len: usize = h.shape.iter().product();
    let values = r.f64s(h.n_samples * len)?;
    let mut labels = Vec::with_capacity(h.n_samples);
    for _ in 0..h.n_samples {
        labels.push(r.u32()? as usize);
    }
    let mut conditions = Vec::with_capacity(h.n_samples);
    for _ in 0..h.n_samples {
        conditions.push(r.u32()? as usize);
    }
    let mut indices = Vec::with_capacity(h.n_samples);
    for _ in 0..h.n_samples {
        indices.push(r.u32()? as usize);
    }
    let splits = r.take(h.n_samples)?;
    r.finish()?;
    let samples = (0..h.n_samples)
        .map(|i| {
            let split = match splits[i] {
                0 => Ok(Split::Train),
                1 => Ok(Split::Test),
                v => Err(Error::Format(format!("bad split flag {v}"))),
            }?;
            Ok(Sample {
                values: values[i * len..(i + 1) * len].to_vec(),
                label: labels[i],
                condition: conditions[i],
                index: indices[i],
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        shape: h.shape,
        n_classes: h.n_classes,
        n_conditions: h.n_conditions,
        split_fraction: h.split_fraction,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_checkpoint(model: &ClassifierModel, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, encode_checkpoint(model)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ClassifierModel> {
    decode_checkpoint(&std::fs::read(path)?)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, encode_dataset(ds)?)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn checkpoint_round_trip() {
        let arch = Architecture {
            input_shape: [2, 8, 4],
            layers: vec![
                crate::nn::LayerSpec::Conv { out_channels: 2, kernel: [3, 2], padding: crate::nn::Padding::Same },
                crate::nn::LayerSpec::Relu,
                crate::nn::LayerSpec::Dense { width: 3 },
            ],
            standardize_input: true,
        };
        let mut m = ClassifierModel::init(arch, 5).unwrap();
        m.scaler = Some(InputScaler { mean: vec![0.25; 64], inv_std: vec![3.0; 64] });
        m.train_meta.final_test_accuracy = 0.5;
        let bytes = encode_checkpoint(&m).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }

    proptest! {
        #[test]
        fn dataset_round_trip(values in proptest::collection::vec(-10.0f64..10.0, 8..=8),
                              labels in proptest::collection::vec(0usize..3, 1..6)) {
            let samples: Vec<Sample> = labels.iter().enumerate().map(|(i, &l)| Sample {
                values: values.iter().map(|v| v * (i as f64 + 1.0)).collect(),
                label: l,
                condition: i % 2,
                index: i,
                split: if i % 3 == 0 { Split::Test } else { Split::Train },
            }).collect();
            let ds = Dataset { shape: [2, 2, 2], n_classes: 3, n_conditions: 2, split_fraction: 0.2, samples };
            let bytes = encode_dataset(&ds).unwrap();
            prop_assert_eq!(decode_dataset(&bytes).unwrap(), ds);
        }
    }
}
