//! Gradient-sign pilot perturbations: dense (every element), power-controlled
//! sparse (top-ranked resource elements only), and a random-sign baseline.
//!
//! Perturbations live on the real `[2, P_t, P_f]` pilot tensor layout: the
//! first half of `delta` is the in-phase part of each resource element (RE),
//! the second half the quadrature part.

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{PilotTensor, Position, ResourceGrid};
use crate::nn::ClassifierModel;
use crate::seed::rng_for;

/// Relative slack when comparing `r * eps^2` against the power cap.
const BUDGET_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Ascend the loss of the true label.
    Untargeted,
    /// Descend the loss of `target_label`.
    Targeted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Added to the transmit grid before impairment and propagation.
    PreChannel,
    /// Added to the received pilot tensor.
    PostChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Per-real-element amplitude.
    pub epsilon: f64,
    /// Fraction of pilot REs perturbed, in (0, 1].
    pub ratio: f64,
    /// Cap on the mean perturbation power; `null` in JSON means uncapped.
    #[serde(serialize_with = "ser_cap", deserialize_with = "de_cap")]
    pub power_cap: f64,
    pub mode: AttackMode,
    #[serde(default)]
    pub target_label: Option<usize>,
    pub injection: Injection,
    pub seed: u64,
}

fn ser_cap<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_none()
    } else {
        s.serialize_some(v)
    }
}

fn de_cap<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.04,
            ratio: 1.0,
            power_cap: 0.0016,
            mode: AttackMode::Untargeted,
            target_label: None,
            injection: Injection::PostChannel,
            seed: 0xa77a_c4ed,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self, n_classes: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            errs.push("attack.epsilon must be a finite number >= 0".into());
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            errs.push("attack.ratio must lie in (0, 1]".into());
        }
        if !(self.power_cap >= 0.0) {
            errs.push("attack.power_cap must be >= 0".into());
        }
        if let Err(e) = check_budget(self.epsilon, self.ratio, self.power_cap) {
            errs.push(format!("attack: {e}"));
        }
        match (self.mode, self.target_label) {
            (AttackMode::Targeted, None) => errs.push("attack.target_label is required in targeted mode".into()),
            (AttackMode::Targeted, Some(t)) if t >= n_classes => {
                errs.push(format!("attack.target_label {t} is not a device label (0..{n_classes})"))
            }
            _ => {}
        }
        errs
    }

    /// Label whose loss is followed for a sample of class `true_label`.
    ///
    /// A targeted attack on a sample already of the target class aims at the
    /// next label instead.
    pub fn attack_label(&self, true_label: usize, n_classes: usize) -> usize {
        match (self.mode, self.target_label) {
            (AttackMode::Targeted, Some(t)) if t == true_label => (t + 1) % n_classes,
            (AttackMode::Targeted, Some(t)) => t,
            _ => true_label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub delta: Vec<f64>,
    pub perturbed_re_count: usize,
    /// `sum |delta|^2 / N` over all real elements.
    pub mean_power: f64,
}

impl Perturbation {
    pub fn zeros(len: usize) -> Self {
        Self { delta: vec![0.0; len], perturbed_re_count: 0, mean_power: 0.0 }
    }

    fn from_delta(delta: Vec<f64>, perturbed_re_count: usize) -> Self {
        let mean_power = if delta.is_empty() { 0.0 } else { delta.iter().map(|d| d * d).sum::<f64>() / delta.len() as f64 };
        Self { delta, perturbed_re_count, mean_power }
    }

    pub fn max_abs(&self) -> f64 {
        self.delta.iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetStatus {
    pub ok: bool,
    /// Nominal mean perturbation power `r * eps^2`.
    pub sigma2: f64,
}

pub fn validate_budget(epsilon: f64, ratio: f64, power_cap: f64) -> BudgetStatus {
    let sigma2 = ratio * epsilon * epsilon;
    BudgetStatus { ok: sigma2 <= power_cap * (1.0 + BUDGET_RTOL), sigma2 }
}

pub fn check_budget(epsilon: f64, ratio: f64, power_cap: f64) -> Result<f64> {
    let st = validate_budget(epsilon, ratio, power_cap);
    if st.ok {
        Ok(st.sigma2)
    } else {
        Err(Error::PowerConstraint { sigma2: st.sigma2, cap: power_cap })
    }
}

/// `floor(r * n_res)`, robust to `r * n` landing just below an integer.
pub fn re_count(ratio: f64, n_res: usize) -> usize {
    ((ratio * n_res as f64 + 1e-9).floor() as usize).min(n_res)
}

#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Direction whose sign the attack follows: `dL/dY` at the true label when
/// untargeted, `-dL/dY` at the target label when targeted.
pub fn attack_direction(model: &ClassifierModel, values: &[f64], label: usize, mode: AttackMode) -> Result<Vec<f64>> {
    let mut g = model.input_gradient(values, label)?;
    if mode == AttackMode::Targeted {
        g.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(g)
}

/// Indices of the `k` REs with the largest `sqrt(gI^2 + gQ^2)`; ties go to
/// the lower RE index. Returned in ascending index order.
pub fn top_influence(direction: &[f64], k: usize) -> Vec<usize> {
    let n = direction.len() / 2;
    let influence: Vec<f64> = (0..n).map(|i| direction[i].hypot(direction[n + i])).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| influence[b].total_cmp(&influence[a]).then(a.cmp(&b)));
    let mut picked = order[..k.min(n)].to_vec();
    picked.sort_unstable();
    picked
}

/// Sparse sign perturbation from a precomputed attack direction.
pub fn perturbation_from_direction(direction: &[f64], epsilon: f64, ratio: f64) -> Result<Perturbation> {
    if direction.len() % 2 != 0 {
        return Err(Error::Shape(format!("direction has odd length {}", direction.len())));
    }
    let n = direction.len() / 2;
    let k = re_count(ratio, n);
    let mut delta = vec![0.0; direction.len()];
    if k == n {
        for (d, g) in delta.iter_mut().zip(direction) {
            *d = epsilon * sign(*g);
        }
    } else {
        for re in top_influence(direction, k) {
            delta[re] = epsilon * sign(direction[re]);
            delta[n + re] = epsilon * sign(direction[n + re]);
        }
    }
    Ok(Perturbation::from_delta(delta, k))
}

fn check_sample(model: &ClassifierModel, sample: &PilotTensor) -> Result<()> {
    if sample.shape != model.architecture.input_shape || sample.values.len() != model.input_len() {
        return Err(Error::Shape(format!(
            "sample shape {:?} does not match model input {:?}",
            sample.shape, model.architecture.input_shape
        )));
    }
    Ok(())
}

/// Straightway perturbation: every element moves by `eps * sign(direction)`.
pub fn fgsm(model: &ClassifierModel, sample: &PilotTensor, label: usize, epsilon: f64, mode: AttackMode) -> Result<Perturbation> {
    check_sample(model, sample)?;
    let g = attack_direction(model, &sample.values, label, mode)?;
    perturbation_from_direction(&g, epsilon, 1.0)
}

/// Power-controlled sparse perturbation on the top `floor(r * N_RE)` REs.
pub fn power_controlled(
    model: &ClassifierModel,
    sample: &PilotTensor,
    label: usize,
    epsilon: f64,
    ratio: f64,
    power_cap: f64,
    mode: AttackMode,
) -> Result<Perturbation> {
    check_budget(epsilon, ratio, power_cap)?;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} outside (0, 1]")));
    }
    check_sample(model, sample)?;
    let g = attack_direction(model, &sample.values, label, mode)?;
    perturbation_from_direction(&g, epsilon, ratio)
}

/// Random baseline: `floor(r * N_RE)` uniformly chosen REs, independent
/// random signs on each of their I and Q elements.
pub fn random_perturb(len: usize, epsilon: f64, ratio: f64, seed: u64) -> Result<Perturbation> {
    if len % 2 != 0 {
        return Err(Error::Shape(format!("tensor length {len} is odd")));
    }
    let n = len / 2;
    let k = re_count(ratio, n);
    let mut rng = rng_for(seed, "random-perturb", &[]);
    let mut chosen = sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    let mut delta = vec![0.0; len];
    for re in chosen {
        for idx in [re, n + re] {
            delta[idx] = if rng.random::<bool>() { epsilon } else { -epsilon };
        }
    }
    Ok(Perturbation::from_delta(delta, k))
}

/// `Y' = Y + delta` as a new tensor.
pub fn apply(sample: &PilotTensor, perturbation: &Perturbation) -> Result<PilotTensor> {
    if sample.values.len() != perturbation.delta.len() {
        return Err(Error::Shape(format!(
            "perturbation has {} elements, sample {}",
            perturbation.delta.len(),
            sample.values.len()
        )));
    }
    let mut out = sample.clone();
    for (v, d) in out.values.iter_mut().zip(&perturbation.delta) {
        *v += d;
    }
    Ok(out)
}

/// Add the perturbation to the pilot cells of a transmit grid.
pub fn inject_pre_channel(grid: &ResourceGrid, perturbation: &Perturbation, positions: &[Position]) -> Result<ResourceGrid> {
    let n = positions.len();
    if perturbation.delta.len() != 2 * n {
        return Err(Error::Shape(format!(
            "perturbation covers {} REs, {} pilot positions given",
            perturbation.delta.len() / 2,
            n
        )));
    }
    let mut out = grid.clone();
    for (i, pos) in positions.iter().enumerate() {
        if pos.subcarrier >= grid.n_subcarriers || pos.symbol >= grid.n_symbols {
            return Err(Error::Shape(format!("position ({}, {}) outside the grid", pos.subcarrier, pos.symbol)));
        }
        let idx = grid.index(pos.subcarrier, pos.symbol);
        if !grid.pilot_mask[idx] {
            return Err(Error::Shape(format!("position ({}, {}) is not a pilot cell", pos.subcarrier, pos.symbol)));
        }
        out.cells[idx] += Complex64::new(perturbation.delta[i], perturbation.delta[n + i]);
    }
    Ok(out)
}
