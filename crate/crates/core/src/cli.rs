//! Command-line front end: `gen-dataset`, `train`, `attack`, `sweep`.

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::attack::power_controlled;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{
    write_ablation_csv, write_degradation_csv, write_features_csv, write_heatmap_csv, write_transfer_csv, AblationRow,
    DegradationCurve, EvalReport, Evaluator, SweepCell, TransferRow,
};
use crate::manifest::RunManifest;
use crate::nn::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset};
use crate::nn::{train_with_progress, ClassifierModel, Dataset, Split, TrainHyper};
use crate::sim::Simulator;

pub const DATASET_FILE: &str = "dataset.bin";
pub const MODEL_FILE: &str = "model.bin";
pub const GENERATOR_FILE: &str = "generator.bin";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "rferase", version, about = "Simulate, fingerprint and protect OFDM pilot signals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment config (JSON). Defaults to the built-in default preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` of the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides `master_seed` of the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Suppress progress output.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the labeled pilot dataset.
    GenDataset {
        #[command(flatten)]
        common: Common,
    },
    /// Train the fingerprint classifier.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file (default: <out>/dataset.bin).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Perturb selected test samples and dump clean/perturbed tensors.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Test-split positions, e.g. `0,4,9` or `0..16`.
        #[arg(long, default_value = "0..10")]
        samples: String,
    },
    /// Heatmap, degradation curve, ablation and transfer reports.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Substitute model for the transfer study (trained if absent).
        #[arg(long)]
        generator: Option<PathBuf>,
    },
    /// Print a preset config as JSON.
    PrintConfig {
        #[arg(long, default_value = "default")]
        preset: String,
    },
}

struct Context {
    config: ExperimentConfig,
    out: PathBuf,
    quiet: bool,
}

impl Context {
    fn new(common: &Common) -> Result<Self> {
        let mut config = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = common.seed {
            config.master_seed = s;
        }
        if let Some(o) = &common.out {
            config.output_dir = o.clone();
        }
        config.check()?;
        if let Some(j) = common.jobs {
            if j == 0 {
                return Err(Error::Config(vec!["--jobs must be > 0".into()]));
            }
            // Only the first call in a process can size the global pool.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
        }
        let out = config.output_dir.clone();
        std::fs::create_dir_all(&out)?;
        Ok(Self { config, out, quiet: common.quiet })
    }

    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn path_or(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn dataset(&self, given: &Option<PathBuf>) -> Result<Dataset> {
        let ds = load_dataset(&self.path_or(given, DATASET_FILE))?;
        if ds.shape != self.config.grid.tensor_shape() || ds.n_classes != self.config.n_classes() {
            return Err(Error::Shape(format!(
                "dataset ({:?}, {} classes) does not match the config ({:?}, {} devices)",
                ds.shape,
                ds.n_classes,
                self.config.grid.tensor_shape(),
                self.config.n_classes()
            )));
        }
        Ok(ds)
    }

    fn model(&self, given: &Option<PathBuf>) -> Result<ClassifierModel> {
        let m = load_checkpoint(&self.path_or(given, MODEL_FILE))?;
        if m.architecture.input_shape != self.config.grid.tensor_shape() || m.n_classes() != self.config.n_classes() {
            return Err(Error::Shape("model does not match the config's pilot tensor or device count".into()));
        }
        Ok(m)
    }

    /// Write files, then fold their checksums into the manifest.
    fn finish(&self, command: &str, files: &[&str]) -> Result<()> {
        let mut config_text = self.config.to_json()?;
        config_text.push('\n');
        std::fs::write(self.out.join(CONFIG_FILE), config_text)?;
        let mut m = RunManifest::load_or_new(&self.out, &self.config)?;
        m.record_command(command);
        m.record_file(&self.out, CONFIG_FILE)?;
        for f in files {
            m.record_file(&self.out, f)?;
        }
        m.save(&self.out)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse `a,b,c` and `a..b` (end exclusive) lists.
pub fn parse_selector(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(vec![format!("--samples: cannot parse '{s}'")]);
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: usize = a.parse().map_err(|_| bad())?;
            let b: usize = b.parse().map_err(|_| bad())?;
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    Ok(out)
}

pub fn gen_dataset(common: &Common) -> Result<()> {
    let ctx = Context::new(common)?;
    let sim = Simulator::new(&ctx.config)?;
    let ds = sim.generate_dataset()?;
    save_dataset(&ds, &ctx.out.join(DATASET_FILE))?;
    ctx.log(&format!(
        "dataset: {} samples ({} train / {} test) -> {}",
        ds.len(),
        ds.train().count(),
        ds.test().count(),
        ctx.out.join(DATASET_FILE).display()
    ));
    ctx.finish("gen-dataset", &[DATASET_FILE])
}

#[derive(Serialize)]
struct TrainMetrics {
    train_accuracy: f64,
    test_accuracy: f64,
    epoch_losses: Vec<f64>,
    /// `confusion[true][predicted]` on the test split.
    confusion: Vec<Vec<u64>>,
}

pub fn confusion_matrix(model: &ClassifierModel, dataset: &Dataset, split: Split) -> Result<Vec<Vec<u64>>> {
    let n = dataset.n_classes;
    let mut m = vec![vec![0u64; n]; n];
    for s in dataset.samples.iter().filter(|s| s.split == split) {
        m[s.label][model.predict(&s.values)?] += 1;
    }
    Ok(m)
}

fn train_model(ctx: &Context, ds: &Dataset, hyper: &TrainHyper, what: &str) -> Result<ClassifierModel> {
    let model = train_with_progress(ds, &ctx.config.architecture, hyper, |epoch, loss| {
        ctx.log(&format!("{what}: epoch {:>3}/{} loss {loss:.5}", epoch + 1, hyper.epochs));
    })?;
    ctx.log(&format!(
        "{what}: train accuracy {:.4}, test accuracy {:.4}",
        model.train_meta.train_accuracy, model.train_meta.final_test_accuracy
    ));
    Ok(model)
}

pub fn train(common: &Common, dataset: &Option<PathBuf>) -> Result<()> {
    let ctx = Context::new(common)?;
    let ds = ctx.dataset(dataset)?;
    let model = train_model(&ctx, &ds, &ctx.config.train_hyper(), "train")?;
    save_checkpoint(&model, &ctx.out.join(MODEL_FILE))?;
    let metrics = TrainMetrics {
        train_accuracy: model.train_meta.train_accuracy,
        test_accuracy: model.train_meta.final_test_accuracy,
        epoch_losses: model.train_meta.epoch_losses.clone(),
        confusion: confusion_matrix(&model, &ds, Split::Test)?,
    };
    write_json(&ctx.out.join("train_metrics.json"), &metrics)?;
    ctx.finish("train", &[MODEL_FILE, "train_metrics.json"])
}

pub fn attack(common: &Common, model: &Option<PathBuf>, dataset: &Option<PathBuf>, samples: &str) -> Result<()> {
    let ctx = Context::new(common)?;
    let selection = parse_selector(samples)?;
    let ds = ctx.dataset(dataset)?;
    let model = ctx.model(model)?;
    let sim = Simulator::new(&ctx.config)?;
    let test = ds.test_samples();
    let a = &ctx.config.attack;
    let n = model.n_classes();

    let mut clean_blob = Vec::new();
    let mut pert_blob = Vec::new();
    let mut w = csv::Writer::from_path(ctx.out.join("attack_report.csv"))?;
    w.write_record([
        "sample",
        "device",
        "condition",
        "index",
        "clean_prediction",
        "perturbed_prediction",
        "perturbed_re_count",
        "sigma2",
        "max_abs_delta",
    ])?;
    for &pos in &selection {
        let s = test.get(pos).ok_or_else(|| {
            Error::Config(vec![format!("--samples: position {pos} beyond the {} test samples", test.len())])
        })?;
        let tensor = sim.pilots_of(s);
        let delta = power_controlled(&model, &tensor, a.attack_label(s.label, n), a.epsilon, a.ratio, a.power_cap, a.mode)?;
        let perturbed = sim.perturbed_sample(s, &delta, a.injection)?;
        for v in &s.values {
            clean_blob.extend_from_slice(&v.to_le_bytes());
        }
        for v in &perturbed {
            pert_blob.extend_from_slice(&v.to_le_bytes());
        }
        w.write_record([
            pos.to_string(),
            s.label.to_string(),
            s.condition.to_string(),
            s.index.to_string(),
            model.predict(&s.values)?.to_string(),
            model.predict(&perturbed)?.to_string(),
            delta.perturbed_re_count.to_string(),
            format!("{}", delta.mean_power),
            format!("{}", delta.max_abs()),
        ])?;
    }
    w.flush()?;
    std::fs::write(ctx.out.join("attack_clean.bin"), clean_blob)?;
    std::fs::write(ctx.out.join("attack_perturbed.bin"), pert_blob)?;
    ctx.log(&format!("attack: {} samples -> {}", selection.len(), ctx.out.display()));
    ctx.finish("attack", &["attack_report.csv", "attack_clean.bin", "attack_perturbed.bin"])
}

#[derive(Serialize)]
struct SweepReport<'a> {
    config_hash: String,
    master_seed: u64,
    clean_accuracy: f64,
    attack: EvalReportSummary,
    heatmap: &'a [SweepCell],
    heatmap_diagnostics: &'a [String],
    degradation_threshold: Option<f64>,
    degradation: &'a DegradationCurve,
    ablation: &'a [AblationRow],
    transfer: &'a [TransferRow],
}

#[derive(Serialize)]
struct EvalReportSummary {
    psr: f64,
    psr_conditional: f64,
    mean_sigma2: f64,
    confusion: Vec<Vec<u64>>,
    link: Option<crate::channel::LinkStats>,
}

impl From<&EvalReport> for EvalReportSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            psr: r.psr,
            psr_conditional: r.psr_conditional,
            mean_sigma2: r.mean_sigma2,
            confusion: r.confusion.clone(),
            link: r.link.clone(),
        }
    }
}

pub fn sweep(common: &Common, model: &Option<PathBuf>, dataset: &Option<PathBuf>, generator: &Option<PathBuf>) -> Result<()> {
    let ctx = Context::new(common)?;
    let ds = ctx.dataset(dataset)?;
    let model = ctx.model(model)?;
    let cfg = &ctx.config;
    let sim = Simulator::new(cfg)?;
    let ev = Evaluator::new(&sim, &ds)?;
    let mut files = vec!["heatmap.csv", "degradation.csv", "ablation.csv", "transfer.csv", "report.json"];

    ctx.log("sweep: configured attack");
    let main = ev.psr(&model, &cfg.attack, true)?;
    ctx.log(&format!("sweep: psr {:.4} at eps {} ratio {}", main.psr, cfg.attack.epsilon, cfg.attack.ratio));

    ctx.log("sweep: heatmap");
    let grid = ev.sweep_heatmap(&model, &cfg.attack, &cfg.sweep.ratios, &cfg.sweep.budgets)?;
    write_heatmap_csv(&ctx.out.join("heatmap.csv"), &grid)?;

    ctx.log("sweep: degradation curve");
    let curve = ev.budget_degradation_curve(&cfg.sweep.degradation_budgets, cfg.attack.injection, cfg.seeds().attack)?;
    write_degradation_csv(&ctx.out.join("degradation.csv"), &curve)?;

    ctx.log("sweep: ablation");
    let base = crate::attack::PerturbationConfig { seed: cfg.seeds().attack, ..cfg.attack.clone() };
    let ablation = ev.ablation(&model, &base, &cfg.sweep.ablation_budgets, cfg.sweep.ablation_seeds)?;
    write_ablation_csv(&ctx.out.join("ablation.csv"), &ablation)?;

    ctx.log("sweep: transfer");
    let gen_model = match generator {
        Some(p) => load_checkpoint(p)?,
        None => {
            let g = train_model(&ctx, &ds, &cfg.transfer_hyper(), "substitute")?;
            save_checkpoint(&g, &ctx.out.join(GENERATOR_FILE))?;
            files.push(GENERATOR_FILE);
            g
        }
    };
    let clean_error = 1.0 - ev.psr(&model, &crate::attack::PerturbationConfig { epsilon: 0.0, ..cfg.attack.clone() }, false)?.clean_accuracy;
    let mut transfer = Vec::new();
    for &budget in &cfg.sweep.budgets {
        let a = crate::attack::PerturbationConfig { epsilon: budget, ratio: 1.0, ..cfg.attack.clone() };
        let t = ev.transfer_eval(&gen_model, &model, &a, false)?;
        transfer.push(TransferRow {
            epsilon: budget,
            ratio: 1.0,
            target_clean_error: clean_error,
            transfer_psr: t.psr,
            white_box_psr: grid.psr_at(1.0, budget).unwrap_or(f64::NAN),
        });
    }
    write_transfer_csv(&ctx.out.join("transfer.csv"), &transfer)?;

    if cfg.sweep.export_features {
        write_features_csv(&ctx.out.join("features.csv"), &model, &ds)?;
        files.push("features.csv");
    }

    let report = SweepReport {
        config_hash: crate::manifest::config_hash(cfg)?,
        master_seed: cfg.master_seed,
        clean_accuracy: main.clean_accuracy,
        attack: (&main).into(),
        heatmap: &grid.cells,
        heatmap_diagnostics: &grid.diagnostics,
        degradation_threshold: curve.threshold,
        degradation: &curve,
        ablation: &ablation,
        transfer: &transfer,
    };
    write_json(&ctx.out.join("report.json"), &report)?;
    for d in &grid.diagnostics {
        ctx.log(&format!("sweep: failed cell: {d}"));
    }
    ctx.log(&format!("sweep: reports -> {}", ctx.out.display()));
    ctx.finish("sweep", &files)
}

pub fn print_config(preset: &str) -> Result<()> {
    let c = ExperimentConfig::preset(preset)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", c.to_json()?)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenDataset { common } => gen_dataset(common),
        Command::Train { common, dataset } => train(common, dataset),
        Command::Attack { common, model, dataset, samples } => attack(common, model, dataset, samples),
        Command::Sweep { common, model, dataset, generator } => sweep(common, model, dataset, generator),
        Command::PrintConfig { preset } => print_config(preset),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_parsing() {
        assert_eq!(parse_selector("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_selector("4, 1,7").unwrap(), vec![4, 1, 7]);
        assert_eq!(parse_selector("0..2,5").unwrap(), vec![0, 1, 5]);
        assert!(parse_selector("x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
