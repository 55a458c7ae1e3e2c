//! CNN classifier with layer-wise reverse-mode differentiation.
//!
//! The forward pass records every layer input (convolutions keep their
//! zero-padded input, pools their argmax) on a [`Trace`]; the backward pass
//! walks it in reverse and yields both parameter gradients and the gradient
//! with respect to the raw input sample.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::{Architecture, LayerSpec, Padding};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Batches are split into fixed chunks so the gradient sum order does not
/// depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        Self { weight: vec![0.0; self.weight.len()], bias: vec![0.0; self.bias.len()] }
    }

    fn add_scaled(&mut self, other: &LayerParams, scale: f64) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }
}

pub type Gradients = Vec<LayerParams>;

/// Frozen per-element standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl InputScaler {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, len: usize) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; len];
        let mut m2 = vec![0.0; len];
        for r in rows {
            n += 1;
            for i in 0..len {
                let d = r[i] - mean[i];
                mean[i] += d / n as f64;
                m2[i] += d * (r[i] - mean[i]);
            }
        }
        let inv_std = m2
            .iter()
            .map(|&s| {
                let std = if n > 1 { (s / (n - 1) as f64).sqrt() } else { 0.0 };
                1.0 / std.max(1e-6)
            })
            .collect();
        Self { mean, inv_std }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Mean training loss of each epoch (measured before each update).
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub final_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub architecture: Architecture,
    pub params: Vec<LayerParams>,
    pub scaler: Option<InputScaler>,
    pub train_meta: TrainMeta,
    shapes: Vec<[usize; 3]>,
}

#[derive(Debug, Default)]
pub struct Trace {
    /// Input of each layer (zero-padded for convolutions).
    inputs: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pt: usize,
    pl: usize,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: [usize; 3], o: usize, kh: usize, kw: usize, padding: Padding) -> Self {
        let [c, h, w] = input;
        match padding {
            Padding::Same => ConvGeom {
                c,
                h,
                w,
                o,
                kh,
                kw,
                pt: (kh - 1) / 2,
                pl: (kw - 1) / 2,
                hp: h + kh - 1,
                wp: w + kw - 1,
                ho: h,
                wo: w,
            },
            Padding::Valid => ConvGeom {
                c,
                h,
                w,
                o,
                kh,
                kw,
                pt: 0,
                pl: 0,
                hp: h,
                wp: w,
                ho: h - kh + 1,
                wo: w - kw + 1,
            },
        }
    }

    fn pad(&self, x: &[f64]) -> Vec<f64> {
        if self.hp == self.h && self.wp == self.w {
            return x.to_vec();
        }
        let mut p = vec![0.0; self.c * self.hp * self.wp];
        for c in 0..self.c {
            for y in 0..self.h {
                let src = &x[(c * self.h + y) * self.w..][..self.w];
                let dst = &mut p[(c * self.hp + y + self.pt) * self.wp + self.pl..][..self.w];
                dst.copy_from_slice(src);
            }
        }
        p
    }

    fn crop(&self, p: &[f64]) -> Vec<f64> {
        if self.hp == self.h && self.wp == self.w {
            return p.to_vec();
        }
        let mut x = vec![0.0; self.c * self.h * self.w];
        for c in 0..self.c {
            for y in 0..self.h {
                let src = &p[(c * self.hp + y + self.pt) * self.wp + self.pl..][..self.w];
                x[(c * self.h + y) * self.w..][..self.w].copy_from_slice(src);
            }
        }
        x
    }

    fn forward(&self, padded: &[f64], p: &LayerParams) -> Vec<f64> {
        let plane = self.ho * self.wo;
        let mut out = vec![0.0; self.o * plane];
        for o in 0..self.o {
            let out_o = &mut out[o * plane..(o + 1) * plane];
            out_o.fill(p.bias[o]);
            for c in 0..self.c {
                let inp = &padded[c * self.hp * self.wp..(c + 1) * self.hp * self.wp];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let wv = p.weight[((o * self.c + c) * self.kh + ky) * self.kw + kx];
                        for y in 0..self.ho {
                            let src = &inp[(y + ky) * self.wp + kx..][..self.wo];
                            let dst = &mut out_o[y * self.wo..][..self.wo];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates `scale * dL/dparams` into `g`; returns `dL/d(padded input)`.
    fn backward(&self, padded: &[f64], dout: &[f64], p: &LayerParams, g: &mut LayerParams, scale: f64) -> Vec<f64> {
        let plane = self.ho * self.wo;
        let in_plane = self.hp * self.wp;
        let mut dpad = vec![0.0; self.c * in_plane];
        for o in 0..self.o {
            let d_o = &dout[o * plane..(o + 1) * plane];
            g.bias[o] += scale * d_o.iter().sum::<f64>();
            for c in 0..self.c {
                let inp = &padded[c * in_plane..(c + 1) * in_plane];
                let dinp = &mut dpad[c * in_plane..(c + 1) * in_plane];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let wi = ((o * self.c + c) * self.kh + ky) * self.kw + kx;
                        let wv = p.weight[wi];
                        let mut acc = 0.0;
                        for y in 0..self.ho {
                            let off = (y + ky) * self.wp + kx;
                            let dy = &d_o[y * self.wo..][..self.wo];
                            let src = &inp[off..][..self.wo];
                            acc += dy.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            for (d, v) in dinp[off..][..self.wo].iter_mut().zip(dy) {
                                *d += wv * v;
                            }
                        }
                        g.weight[wi] += scale * acc;
                    }
                }
            }
        }
        dpad
    }
}

/// Softmax with the max subtracted first.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax cross-entropy of one sample and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

/// Mean softmax cross-entropy over a `[batch, n_classes]` logit tensor.
pub fn loss_ce(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let b = logits.batch_size();
    if labels.len() != b || b == 0 {
        return Err(Error::Shape(format!("{} labels for {} logit rows", labels.len(), b)));
    }
    let n = logits.row_len();
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {n} classes")));
        }
        total += cross_entropy(logits.row(i), l).0;
    }
    Ok(total / b as f64)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl ClassifierModel {
    /// Fan-in scaled uniform initialization `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init(architecture: Architecture, seed: u64) -> Result<Self> {
        let shapes = architecture.shapes()?;
        let mut params = Vec::with_capacity(architecture.layers.len());
        let mut input = architecture.input_shape;
        for (i, layer) in architecture.layers.iter().enumerate() {
            let mut rng = rng_for(seed, "init", &[i as u64]);
            let p = match *layer {
                LayerSpec::Conv { out_channels, kernel: [kh, kw], .. } => {
                    let fan_in = input[0] * kh * kw;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    LayerParams {
                        weight: (0..out_channels * fan_in).map(|_| rng.random_range(-bound..bound)).collect(),
                        bias: vec![0.0; out_channels],
                    }
                }
                LayerSpec::Dense { width } => {
                    let fan_in: usize = input.iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    LayerParams {
                        weight: (0..width * fan_in).map(|_| rng.random_range(-bound..bound)).collect(),
                        bias: vec![0.0; width],
                    }
                }
                _ => LayerParams::default(),
            };
            params.push(p);
            input = shapes[i];
        }
        Ok(Self { architecture, params, scaler: None, train_meta: TrainMeta::default(), shapes })
    }

    /// Build from explicit parameters (shapes are checked).
    pub fn from_parts(
        architecture: Architecture,
        params: Vec<LayerParams>,
        scaler: Option<InputScaler>,
        train_meta: TrainMeta,
    ) -> Result<Self> {
        let template = Self::init(architecture, 0)?;
        if params.len() != template.params.len() {
            return Err(Error::Shape(format!("{} parameter groups for {} layers", params.len(), template.params.len())));
        }
        for (i, (p, t)) in params.iter().zip(&template.params).enumerate() {
            if p.weight.len() != t.weight.len() || p.bias.len() != t.bias.len() {
                return Err(Error::Shape(format!("layer {i}: parameter shape mismatch")));
            }
        }
        if let Some(s) = &scaler {
            let n = template.architecture.input_len();
            if s.mean.len() != n || s.inv_std.len() != n {
                return Err(Error::Shape("input scaler length mismatch".into()));
            }
        }
        Ok(Self { params, scaler, train_meta, ..template })
    }

    pub fn n_classes(&self) -> usize {
        self.shapes.last().map(|s| s[0]).unwrap_or(0)
    }

    pub fn input_len(&self) -> usize {
        self.architecture.input_len()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        self.params.iter().map(LayerParams::zeros_like).collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::Shape(format!(
                "sample has {} values, architecture expects {:?}",
                x.len(),
                self.architecture.input_shape
            )));
        }
        Ok(())
    }

    fn layer_input_shape(&self, i: usize) -> [usize; 3] {
        if i == 0 {
            self.architecture.input_shape
        } else {
            self.shapes[i - 1]
        }
    }

    /// Forward through layers `0..=last`, optionally recording a trace.
    fn run(&self, x: &[f64], mut trace: Option<&mut Trace>, last: usize) -> Vec<f64> {
        let mut cur: Vec<f64> = match &self.scaler {
            Some(s) => x.iter().zip(&s.mean).zip(&s.inv_std).map(|((v, m), k)| (v - m) * k).collect(),
            None => x.to_vec(),
        };
        for (i, layer) in self.architecture.layers.iter().enumerate().take(last + 1) {
            let in_shape = self.layer_input_shape(i);
            let p = &self.params[i];
            let (next, stored, arg) = match *layer {
                LayerSpec::Conv { out_channels, kernel: [kh, kw], padding } => {
                    let g = ConvGeom::new(in_shape, out_channels, kh, kw, padding);
                    let padded = g.pad(&cur);
                    (g.forward(&padded, p), padded, Vec::new())
                }
                LayerSpec::Relu => (cur.iter().map(|&v| v.max(0.0)).collect(), cur, Vec::new()),
                LayerSpec::MaxPool { pool: [ph, pw] } => {
                    let [c, h, w] = in_shape;
                    let (ho, wo) = (h / ph, w / pw);
                    let mut out = vec![0.0; c * ho * wo];
                    let mut arg = vec![0usize; c * ho * wo];
                    for ch in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let mut best = usize::MAX;
                                for dy in 0..ph {
                                    for dx in 0..pw {
                                        let idx = (ch * h + y * ph + dy) * w + xx * pw + dx;
                                        if best == usize::MAX || cur[idx] > cur[best] {
                                            best = idx;
                                        }
                                    }
                                }
                                let o = (ch * ho + y) * wo + xx;
                                out[o] = cur[best];
                                arg[o] = best;
                            }
                        }
                    }
                    (out, cur, arg)
                }
                LayerSpec::Dense { width } => {
                    let n = cur.len();
                    let out = (0..width)
                        .map(|j| {
                            let row = &p.weight[j * n..(j + 1) * n];
                            p.bias[j] + row.iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>()
                        })
                        .collect();
                    (out, cur, Vec::new())
                }
            };
            if let Some(t) = trace.as_deref_mut() {
                t.inputs.push(stored);
                t.argmax.push(arg);
            }
            cur = next;
        }
        cur
    }

    /// Reverse pass. Accumulates `scale * dL/dtheta` into `grads` and returns
    /// `dL/dx` for the raw (unstandardized) input.
    fn backprop(&self, trace: &Trace, mut d: Vec<f64>, grads: &mut Gradients, scale: f64) -> Vec<f64> {
        for i in (0..self.architecture.layers.len()).rev() {
            let in_shape = self.layer_input_shape(i);
            let input = &trace.inputs[i];
            d = match self.architecture.layers[i] {
                LayerSpec::Conv { out_channels, kernel: [kh, kw], padding } => {
                    let g = ConvGeom::new(in_shape, out_channels, kh, kw, padding);
                    let dpad = g.backward(input, &d, &self.params[i], &mut grads[i], scale);
                    g.crop(&dpad)
                }
                LayerSpec::Relu => d.iter().zip(input).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect(),
                LayerSpec::MaxPool { .. } => {
                    let mut din = vec![0.0; input.len()];
                    for (o, &src) in trace.argmax[i].iter().enumerate() {
                        din[src] += d[o];
                    }
                    din
                }
                LayerSpec::Dense { width } => {
                    let n = input.len();
                    let p = &self.params[i];
                    let g = &mut grads[i];
                    let mut din = vec![0.0; n];
                    for j in 0..width {
                        let dj = d[j];
                        g.bias[j] += scale * dj;
                        let row = &p.weight[j * n..(j + 1) * n];
                        let grow = &mut g.weight[j * n..(j + 1) * n];
                        for k in 0..n {
                            grow[k] += scale * dj * input[k];
                            din[k] += row[k] * dj;
                        }
                    }
                    din
                }
            };
        }
        if let Some(s) = &self.scaler {
            for (v, k) in d.iter_mut().zip(&s.inv_std) {
                *v *= k;
            }
        }
        d
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.run(x, None, self.architecture.layers.len() - 1))
    }

    /// Per-sample logits for a `[batch, c, h, w]` tensor.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.shape.len() != 4 || batch.shape[1..] != self.architecture.input_shape {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match input {:?}",
                batch.shape, self.architecture.input_shape
            )));
        }
        let b = batch.batch_size();
        let rows: Vec<Vec<f64>> = (0..b).into_par_iter().map(|i| self.logits(batch.row(i))).collect::<Result<_>>()?;
        let n = self.n_classes();
        Tensor::new(vec![b, n], rows.concat())
    }

    /// Argmax class, ties broken toward the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Activations of the second-to-last dense layer.
    pub fn penultimate_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let layer = self
            .architecture
            .penultimate_layer()
            .ok_or_else(|| Error::InvalidArgument("model needs at least two dense layers".into()))?;
        Ok(self.run(x, None, layer))
    }

    /// Loss, logits and input gradient of one sample; parameter gradients are
    /// accumulated into `grads` with weight `scale`, if given.
    pub fn sample_gradient(
        &self,
        x: &[f64],
        label: usize,
        grads: Option<(&mut Gradients, f64)>,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        if label >= self.n_classes() {
            return Err(Error::InvalidArgument(format!("label {label} out of range")));
        }
        let mut trace = Trace::default();
        let logits = self.run(x, Some(&mut trace), self.architecture.layers.len() - 1);
        let (loss, dlogits) = cross_entropy(&logits, label);
        let mut scratch;
        let (g, scale) = match grads {
            Some((g, s)) => (g, s),
            None => {
                scratch = self.zero_grads();
                (&mut scratch, 0.0)
            }
        };
        let dx = self.backprop(&trace, dlogits, g, scale);
        Ok((loss, logits, dx))
    }

    /// `dL/dY` for one sample, where L is the cross-entropy at `label`.
    pub fn input_gradient(&self, x: &[f64], label: usize) -> Result<Vec<f64>> {
        Ok(self.sample_gradient(x, label, None)?.2)
    }

    /// Mean-loss gradients over a batch: parameter gradients and the input
    /// gradient tensor (each row is `dL_mean/dx_i`).
    pub fn backward(&self, batch: &Tensor, labels: &[usize]) -> Result<(Gradients, Tensor)> {
        let b = batch.batch_size();
        if labels.len() != b || b == 0 {
            return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
        }
        let rows: Vec<&[f64]> = (0..b).map(|i| batch.row(i)).collect();
        let (_, grads, dx) = self.batch_gradients(&rows, labels, true)?;
        Ok((grads, Tensor::new(batch.shape.clone(), dx.concat())?))
    }

    /// Mean loss and mean parameter gradients; input gradients only if asked.
    pub(crate) fn batch_gradients(
        &self,
        rows: &[&[f64]],
        labels: &[usize],
        want_input: bool,
    ) -> Result<(f64, Gradients, Vec<Vec<f64>>)> {
        let scale = 1.0 / rows.len() as f64;
        let idx: Vec<usize> = (0..rows.len()).collect();
        let partials: Vec<(f64, Gradients, Vec<Vec<f64>>)> = idx
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = self.zero_grads();
                let mut loss = 0.0;
                let mut dxs = Vec::new();
                for &i in chunk {
                    let (l, _, mut dx) = self.sample_gradient(rows[i], labels[i], Some((&mut g, 1.0)))?;
                    loss += l;
                    if want_input {
                        dx.iter_mut().for_each(|v| *v *= scale);
                        dxs.push(dx);
                    }
                }
                Ok((loss, g, dxs))
            })
            .collect::<Result<_>>()?;
        let mut grads = self.zero_grads();
        let mut loss = 0.0;
        let mut dx = Vec::new();
        for (l, g, d) in partials {
            loss += l;
            for (a, b) in grads.iter_mut().zip(&g) {
                a.add_scaled(b, scale);
            }
            dx.extend(d);
        }
        Ok((loss * scale, grads, dx))
    }

    pub(crate) fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.add_scaled(g, -lr);
        }
    }

    /// All trainable parameters, layer by layer (weights then biases).
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.weight.iter().chain(&p.bias).copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        let mut it = flat.iter().copied();
        for p in &mut self.params {
            p.weight.iter_mut().chain(p.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }
}

pub fn flatten_grads(g: &Gradients) -> Vec<f64> {
    g.iter().flat_map(|p| p.weight.iter().chain(&p.bias).copied()).collect()
}
