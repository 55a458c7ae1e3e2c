//! Experiment harness: protection success rate (PSR), the (ratio, budget)
//! heatmap, the link degradation curve, the random-sign ablation and
//! cross-model transfer.
//!
//! Every evaluation walks the test split in dataset order and regenerates
//! frames from the shared stage seeds, so cells differ only in the attack.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::attack::{attack_direction, check_budget, perturbation_from_direction, random_perturb, Injection, Perturbation, PerturbationConfig};
use crate::channel::LinkStats;
use crate::error::{Error, Result};
use crate::nn::{ClassifierModel, Dataset, Sample, Split};
use crate::seed::derive_seed;
use crate::sim::Simulator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub device: usize,
    pub condition: usize,
    pub index: usize,
    pub true_label: usize,
    pub clean_prediction: usize,
    pub perturbed_prediction: usize,
    pub sigma2: f64,
    pub perturbed_re_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attack: PerturbationConfig,
    pub n_samples: usize,
    pub clean_accuracy: f64,
    /// Misidentified fraction over all test samples.
    pub psr: f64,
    /// Misidentified fraction over the samples classified correctly when clean.
    pub psr_conditional: f64,
    /// `confusion[true][perturbed prediction]`.
    pub confusion: Vec<Vec<u64>>,
    pub mean_sigma2: f64,
    pub link: Option<LinkStats>,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub ratio: f64,
    pub budget: f64,
    pub psr: f64,
    pub psr_conditional: f64,
    pub bler: f64,
    pub plr: f64,
    pub throughput: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub ratios: Vec<f64>,
    pub budgets: Vec<f64>,
    /// `psr_matrix[ratio][budget]`; NaN marks a failed cell.
    pub psr_matrix: Vec<Vec<f64>>,
    pub bler_matrix: Vec<Vec<f64>>,
    pub cells: Vec<SweepCell>,
    pub diagnostics: Vec<String>,
}

impl SweepGrid {
    pub fn psr_at(&self, ratio: f64, budget: f64) -> Option<f64> {
        let r = self.ratios.iter().position(|&x| (x - ratio).abs() < 1e-12)?;
        let b = self.budgets.iter().position(|&x| (x - budget).abs() < 1e-12)?;
        Some(self.psr_matrix[r][b])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationPoint {
    pub budget: f64,
    pub link: LinkStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationCurve {
    pub points: Vec<DegradationPoint>,
    /// Smallest budget with BLER > 0, if any.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub budget: f64,
    pub random_mean: f64,
    pub random_std: f64,
    pub random_psr: Vec<f64>,
    pub pc_ratio_02: f64,
    pub pc_ratio_10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub epsilon: f64,
    pub ratio: f64,
    pub target_clean_error: f64,
    pub transfer_psr: f64,
    pub white_box_psr: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Evaluation context over the test split of one dataset.
pub struct Evaluator<'a> {
    sim: &'a Simulator,
    test: Vec<&'a Sample>,
}

impl<'a> Evaluator<'a> {
    pub fn new(sim: &'a Simulator, dataset: &'a Dataset) -> Result<Self> {
        if dataset.n_classes != sim.n_classes() || dataset.shape != sim.grid.tensor_shape() {
            return Err(Error::Shape("dataset does not belong to this setup".into()));
        }
        let test: Vec<&Sample> = dataset.samples.iter().filter(|s| s.split == Split::Test).collect();
        if test.is_empty() {
            return Err(Error::InvalidArgument("dataset has no test samples".into()));
        }
        Ok(Self { sim, test })
    }

    pub fn test_samples(&self) -> &[&'a Sample] {
        &self.test
    }

    pub fn clean_predictions(&self, model: &ClassifierModel) -> Result<Vec<usize>> {
        self.test.par_iter().map(|s| model.predict(&s.values)).collect()
    }

    /// Attack direction of every test sample (computed once, reused across cells).
    pub fn directions(&self, model: &ClassifierModel, cfg: &PerturbationConfig) -> Result<Vec<Vec<f64>>> {
        let n = model.n_classes();
        self.test
            .par_iter()
            .map(|s| attack_direction(model, &s.values, cfg.attack_label(s.label, n), cfg.mode))
            .collect()
    }

    /// Core loop: perturb every test sample, classify with `target`, and
    /// score the link on the first `frames_per_cell` frames when asked.
    pub fn evaluate_with<F>(
        &self,
        target: &ClassifierModel,
        cfg: &PerturbationConfig,
        clean: &[usize],
        with_link: bool,
        delta_for: F,
    ) -> Result<EvalReport>
    where
        F: Fn(usize) -> Result<Perturbation> + Sync,
    {
        let n_classes = target.n_classes();
        let link_frames = if with_link { self.sim.link.frames_per_cell.min(self.test.len()) } else { 0 };
        let rows: Vec<(SampleRecord, Option<LinkStats>)> = (0..self.test.len())
            .into_par_iter()
            .map(|i| {
                let s = self.test[i];
                let delta = delta_for(i)?;
                let values = self.sim.perturbed_sample(s, &delta, cfg.injection)?;
                let perturbed_prediction = target.predict(&values)?;
                let link = if i < link_frames {
                    Some(self.sim.link(s.label, s.condition, s.index, Some((&delta, cfg.injection)))?)
                } else {
                    None
                };
                let rec = SampleRecord {
                    device: s.label,
                    condition: s.condition,
                    index: s.index,
                    true_label: s.label,
                    clean_prediction: clean[i],
                    perturbed_prediction,
                    sigma2: delta.mean_power,
                    perturbed_re_count: delta.perturbed_re_count,
                };
                Ok((rec, link))
            })
            .collect::<Result<_>>()?;

        let n = rows.len();
        let mut confusion = vec![vec![0u64; n_classes]; n_classes];
        let (mut fooled, mut correct, mut fooled_correct) = (0usize, 0usize, 0usize);
        let mut sigma2 = 0.0;
        for (r, _) in &rows {
            confusion[r.true_label][r.perturbed_prediction] += 1;
            let miss = r.perturbed_prediction != r.true_label;
            fooled += usize::from(miss);
            if r.clean_prediction == r.true_label {
                correct += 1;
                fooled_correct += usize::from(miss);
            }
            sigma2 += r.sigma2;
        }
        let link = with_link.then(|| LinkStats::combine(rows.iter().filter_map(|(_, l)| l.as_ref())));
        Ok(EvalReport {
            attack: cfg.clone(),
            n_samples: n,
            clean_accuracy: correct as f64 / n as f64,
            psr: fooled as f64 / n as f64,
            psr_conditional: if correct == 0 { 0.0 } else { fooled_correct as f64 / correct as f64 },
            confusion,
            mean_sigma2: sigma2 / n as f64,
            link,
            records: rows.into_iter().map(|(r, _)| r).collect(),
        })
    }

    /// PSR of the configured attack against `model` itself.
    pub fn psr(&self, model: &ClassifierModel, cfg: &PerturbationConfig, with_link: bool) -> Result<EvalReport> {
        self.transfer_eval(model, model, cfg, with_link)
    }

    /// Perturbations crafted on `generator`, measured on `target`.
    pub fn transfer_eval(
        &self,
        generator: &ClassifierModel,
        target: &ClassifierModel,
        cfg: &PerturbationConfig,
        with_link: bool,
    ) -> Result<EvalReport> {
        if generator.n_classes() != target.n_classes() {
            return Err(Error::LabelSpace { generator: generator.n_classes(), target: target.n_classes() });
        }
        if generator.architecture.input_shape != target.architecture.input_shape {
            return Err(Error::Shape("generator and target take different inputs".into()));
        }
        check_budget(cfg.epsilon, cfg.ratio, cfg.power_cap)?;
        let dirs = self.directions(generator, cfg)?;
        let clean = self.clean_predictions(target)?;
        self.evaluate_with(target, cfg, &clean, with_link, |i| perturbation_from_direction(&dirs[i], cfg.epsilon, cfg.ratio))
    }

    /// PSR and link quality on every (ratio, budget) cell. Cells that break
    /// the power cap or fail at runtime are NaN, with a diagnostic.
    pub fn sweep_heatmap(&self, model: &ClassifierModel, base: &PerturbationConfig, ratios: &[f64], budgets: &[f64]) -> Result<SweepGrid> {
        let dirs = self.directions(model, base)?;
        let clean = self.clean_predictions(model)?;
        let mut grid = SweepGrid {
            ratios: ratios.to_vec(),
            budgets: budgets.to_vec(),
            psr_matrix: vec![vec![f64::NAN; budgets.len()]; ratios.len()],
            bler_matrix: vec![vec![f64::NAN; budgets.len()]; ratios.len()],
            cells: Vec::new(),
            diagnostics: Vec::new(),
        };
        for (ri, &ratio) in ratios.iter().enumerate() {
            for (bi, &budget) in budgets.iter().enumerate() {
                let cfg = PerturbationConfig { epsilon: budget, ratio, ..base.clone() };
                let res = check_budget(budget, ratio, cfg.power_cap).and_then(|_| {
                    self.evaluate_with(model, &cfg, &clean, true, |i| perturbation_from_direction(&dirs[i], budget, ratio))
                });
                let cell = match res {
                    Ok(rep) => {
                        let link = rep.link.unwrap_or_default();
                        grid.psr_matrix[ri][bi] = rep.psr;
                        grid.bler_matrix[ri][bi] = link.bler;
                        SweepCell {
                            ratio,
                            budget,
                            psr: rep.psr,
                            psr_conditional: rep.psr_conditional,
                            bler: link.bler,
                            plr: link.plr,
                            throughput: link.throughput,
                            sigma2: rep.mean_sigma2,
                        }
                    }
                    Err(e) => {
                        grid.diagnostics.push(format!("ratio {ratio}, budget {budget}: {e}"));
                        SweepCell {
                            ratio,
                            budget,
                            psr: f64::NAN,
                            psr_conditional: f64::NAN,
                            bler: f64::NAN,
                            plr: f64::NAN,
                            throughput: f64::NAN,
                            sigma2: f64::NAN,
                        }
                    }
                };
                grid.cells.push(cell);
            }
        }
        Ok(grid)
    }

    /// Link quality under full-ratio random-sign perturbations of growing
    /// amplitude. The power cap is deliberately not applied: the curve
    /// characterizes the link beyond the attack range.
    pub fn budget_degradation_curve(&self, budgets: &[f64], injection: Injection, seed: u64) -> Result<DegradationCurve> {
        if budgets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument("budgets must be sorted ascending".into()));
        }
        let frames = self.sim.link.frames_per_cell.min(self.test.len());
        let len = self.test[0].values.len();
        let mut points = Vec::with_capacity(budgets.len());
        for &budget in budgets {
            let stats: Vec<LinkStats> = (0..frames)
                .into_par_iter()
                .map(|i| {
                    let s = self.test[i];
                    let delta = random_perturb(len, budget, 1.0, derive_seed(seed, "degradation", &[i as u64]))?;
                    self.sim.link(s.label, s.condition, s.index, Some((&delta, injection)))
                })
                .collect::<Result<_>>()?;
            points.push(DegradationPoint { budget, link: LinkStats::combine(&stats) });
        }
        let threshold = points.iter().find(|p| p.link.bler > 0.0).map(|p| p.budget);
        Ok(DegradationCurve { points, threshold })
    }

    /// Random-sign baseline (ratio 1.0, `n_seeds` draws) against the
    /// power-controlled attack at ratios 0.2 and 1.0, budget by budget.
    pub fn ablation(&self, model: &ClassifierModel, base: &PerturbationConfig, budgets: &[f64], n_seeds: usize) -> Result<Vec<AblationRow>> {
        let dirs = self.directions(model, base)?;
        let clean = self.clean_predictions(model)?;
        let len = self.test[0].values.len();
        let mut rows = Vec::with_capacity(budgets.len());
        for &budget in budgets {
            let pc = |ratio: f64| -> Result<f64> {
                let cfg = PerturbationConfig { epsilon: budget, ratio, ..base.clone() };
                check_budget(budget, ratio, cfg.power_cap)?;
                Ok(self.evaluate_with(model, &cfg, &clean, false, |i| perturbation_from_direction(&dirs[i], budget, ratio))?.psr)
            };
            let pc_ratio_02 = pc(0.2)?;
            let pc_ratio_10 = pc(1.0)?;
            let cfg = PerturbationConfig { epsilon: budget, ratio: 1.0, ..base.clone() };
            let random_psr = (0..n_seeds)
                .map(|s| {
                    let rep = self.evaluate_with(model, &cfg, &clean, false, |i| {
                        random_perturb(len, budget, 1.0, derive_seed(base.seed, "ablation", &[s as u64, i as u64]))
                    })?;
                    Ok(rep.psr)
                })
                .collect::<Result<Vec<f64>>>()?;
            let (random_mean, random_std) = mean_std(&random_psr);
            rows.push(AblationRow { budget, random_mean, random_std, random_psr, pc_ratio_02, pc_ratio_10 });
        }
        Ok(rows)
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn write_heatmap_csv(path: &Path, grid: &SweepGrid) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["ratio", "budget", "psr", "psr_conditional", "bler", "plr", "throughput", "sigma2"])?;
    for c in &grid.cells {
        w.write_record([c.ratio, c.budget, c.psr, c.psr_conditional, c.bler, c.plr, c.throughput, c.sigma2].map(fmt))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_degradation_csv(path: &Path, curve: &DegradationCurve) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["budget", "bler", "plr", "throughput", "ber"])?;
    for p in &curve.points {
        w.write_record([p.budget, p.link.bler, p.link.plr, p.link.throughput, p.link.ber()].map(fmt))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["budget", "random_mean", "random_std", "pc_ratio_0.2", "pc_ratio_1.0"])?;
    for r in rows {
        w.write_record([r.budget, r.random_mean, r.random_std, r.pc_ratio_02, r.pc_ratio_10].map(fmt))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_transfer_csv(path: &Path, rows: &[TransferRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["epsilon", "ratio", "target_clean_error", "transfer_psr", "white_box_psr"])?;
    for r in rows {
        w.write_record([r.epsilon, r.ratio, r.target_clean_error, r.transfer_psr, r.white_box_psr].map(fmt))?;
    }
    w.flush()?;
    Ok(())
}

/// Penultimate-layer activations of every sample, one row each.
pub fn write_features_csv(path: &Path, model: &ClassifierModel, dataset: &Dataset) -> Result<()> {
    let features: Vec<Vec<f64>> = dataset.samples.par_iter().map(|s| model.penultimate_features(&s.values)).collect::<Result<_>>()?;
    let mut w = writer(path)?;
    let width = features.first().map_or(0, Vec::len);
    let mut header = vec!["label".to_string(), "condition".into(), "index".into(), "split".into()];
    header.extend((0..width).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (s, f) in dataset.samples.iter().zip(&features) {
        let split = match s.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let mut row = vec![s.label.to_string(), s.condition.to_string(), s.index.to_string(), split.to_string()];
        row.extend(f.iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
