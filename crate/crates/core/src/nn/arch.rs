//! Layer descriptors and shape inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output keeps the input's spatial size; odd leftovers go after.
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: [usize; 2], padding: Padding },
    Relu,
    MaxPool { pool: [usize; 2] },
    /// Fully connected; flattens whatever comes in.
    Dense { width: usize },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[channels, height, width]` of one sample.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Standardize each input element with train-set statistics before the first layer.
    #[serde(default)]
    pub standardize_input: bool,
}

impl Architecture {
    /// Five conv stages (three (3,2) kernels, two (3,1) kernels), each with
    /// ReLU and max-pooling, followed by Dense(128) -> Dense(64) -> Dense(n).
    pub fn default_for(input_shape: [usize; 3], n_classes: usize) -> Self {
        let mut layers = Vec::new();
        let stages = [
            (8, [3, 2], [2, 2]),
            (16, [3, 2], [2, 2]),
            (32, [3, 2], [2, 1]),
            (32, [3, 1], [2, 1]),
            (64, [3, 1], [2, 1]),
        ];
        for (out_channels, kernel, pool) in stages {
            layers.push(LayerSpec::Conv { out_channels, kernel, padding: Padding::Same });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool { pool });
        }
        for width in [128, 64] {
            layers.push(LayerSpec::Dense { width });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { width: n_classes });
        Self { input_shape, layers, standardize_input: true }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Output shape `[c, h, w]` of every layer (dense outputs are `[width, 1, 1]`).
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut cur = self.input_shape;
        if cur.contains(&0) {
            return Err(Error::Shape(format!("input shape {cur:?} has an empty dimension")));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv { out_channels, kernel: [kh, kw], padding } => {
                    if out_channels == 0 || kh == 0 || kw == 0 {
                        return Err(Error::Shape(format!("layer {i}: empty conv")));
                    }
                    match padding {
                        Padding::Same => [out_channels, cur[1], cur[2]],
                        Padding::Valid => {
                            if kh > cur[1] || kw > cur[2] {
                                return Err(Error::Shape(format!(
                                    "layer {i}: kernel {kh}x{kw} larger than input {}x{}",
                                    cur[1], cur[2]
                                )));
                            }
                            [out_channels, cur[1] - kh + 1, cur[2] - kw + 1]
                        }
                    }
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { pool: [ph, pw] } => {
                    if ph == 0 || pw == 0 || cur[1] / ph == 0 || cur[2] / pw == 0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: pool {ph}x{pw} leaves no output from {}x{}",
                            cur[1], cur[2]
                        )));
                    }
                    [cur[0], cur[1] / ph, cur[2] / pw]
                }
                LayerSpec::Dense { width } => {
                    if width == 0 {
                        return Err(Error::Shape(format!("layer {i}: zero-width dense")));
                    }
                    [width, 1, 1]
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    pub fn n_classes(&self) -> Result<usize> {
        match self.layers.last() {
            Some(LayerSpec::Dense { width }) => Ok(*width),
            _ => Err(Error::Shape("architecture must end with a dense layer".into())),
        }
    }

    pub fn validate(&self, n_classes: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = self.shapes() {
            errs.push(format!("architecture: {e}"));
        }
        match self.n_classes() {
            Ok(n) if n != n_classes => {
                errs.push(format!("architecture: final width {n} != number of devices {n_classes}"))
            }
            Err(e) => errs.push(format!("architecture: {e}")),
            _ => {}
        }
        errs
    }

    /// Layer whose output is the penultimate dense representation: the
    /// activation following the second-to-last dense layer, if any.
    pub fn penultimate_layer(&self) -> Option<usize> {
        let dense: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Dense { .. }))
            .map(|(i, _)| i)
            .collect();
        if dense.len() < 2 {
            return None;
        }
        let i = dense[dense.len() - 2];
        match self.layers.get(i + 1) {
            Some(LayerSpec::Relu) => Some(i + 1),
            _ => Some(i),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_fits_pilot_tensor() {
        let a = Architecture::default_for([2, 40, 12], 5);
        let shapes = a.shapes().unwrap();
        let convs: Vec<[usize; 3]> = a
            .layers
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| matches!(l, LayerSpec::MaxPool { .. }))
            .map(|(_, s)| *s)
            .collect();
        assert_eq!(convs, vec![[8, 20, 6], [16, 10, 3], [32, 5, 3], [32, 2, 3], [64, 1, 3]]);
        assert_eq!(*shapes.last().unwrap(), [5, 1, 1]);
        assert_eq!(a.n_classes().unwrap(), 5);
        assert!(a.validate(5).is_empty());
        assert_eq!(a.validate(4).len(), 1);
        let pen = a.penultimate_layer().unwrap();
        assert_eq!(shapes[pen], [64, 1, 1]);
    }

    #[test]
    fn oversized_pooling_rejected() {
        let a = Architecture {
            input_shape: [1, 3, 3],
            layers: vec![LayerSpec::MaxPool { pool: [4, 1] }, LayerSpec::Dense { width: 2 }],
            standardize_input: false,
        };
        assert!(a.shapes().is_err());
    }
}
