//! End-to-end runs of the `rferase` binary on a tiny experiment.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rferase::config::ExperimentConfig;
use rferase::manifest::{sha256_hex, RunManifest, MANIFEST_FILE};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rferase"))
}

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset.conditions = 2;
    c.dataset.samples_per_condition = 10;
    c.training.epochs = 2;
    c.link.frames_per_cell = 4;
    c.sweep.ablation_seeds = 5;
    c.sweep.ablation_budgets = vec![0.01, 0.04];
    c.sweep.degradation_budgets = vec![0.0, 0.1, 0.3];
    c
}

fn write_config(dir: &Path, c: &ExperimentConfig) -> PathBuf {
    let p = dir.join("experiment.json");
    std::fs::write(&p, c.to_json().unwrap()).unwrap();
    p
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn manifest(out: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(out.join(MANIFEST_FILE)).unwrap()).unwrap()
}

/// Checksums of produced files; config.json embeds the output directory.
fn without_config(m: &RunManifest) -> std::collections::BTreeMap<String, String> {
    m.files.iter().filter(|(k, _)| k.as_str() != "config.json").map(|(k, v)| (k.clone(), v.clone())).collect()
}

#[test]
fn print_config_round_trips() {
    let o = bin().args(["print-config"]).output().unwrap();
    ok(&o);
    let c: ExperimentConfig = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(c, ExperimentConfig::default());
    let big = bin().args(["print-config", "--preset", "full_scale"]).output().unwrap();
    ok(&big);
    let c: ExperimentConfig = serde_json::from_slice(&big.stdout).unwrap();
    assert_eq!(c.dataset.samples_per_condition, 1000);
    assert_eq!(bin().args(["print-config", "--preset", "nope"]).output().unwrap().status.code(), Some(2));
}

#[test]
fn invalid_config_exits_with_code_two_and_names_fields() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config();
    c.dataset.split_fraction = 1.5;
    c.attack.ratio = 0.0;
    let cfg = write_config(dir.path(), &c);
    let o = run(&["gen-dataset"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("split_fraction"), "{err}");
    assert!(err.contains("ratio"), "{err}");

    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(run(&["gen-dataset"], &cfg, &dir.path().join("out")).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let o = run(&["train"], &cfg, &dir.path().join("empty"));
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn full_pipeline_is_deterministic_and_checksummed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&run(&["gen-dataset"], &cfg, out));
        ok(&run(&["train"], &cfg, out));
        ok(&run(&["attack", "--samples", "0..6"], &cfg, out));
        ok(&run(&["sweep"], &cfg, out));
    }

    let ma = manifest(&a);
    let mb = manifest(&b);
    assert_eq!(ma.commands, vec!["gen-dataset", "train", "attack", "sweep"]);
    assert!(ma.verify(&a).is_empty());
    for name in [
        "dataset.bin",
        "model.bin",
        "generator.bin",
        "attack_clean.bin",
        "attack_perturbed.bin",
        "attack_report.csv",
        "heatmap.csv",
        "degradation.csv",
        "ablation.csv",
        "transfer.csv",
        "features.csv",
        "report.json",
    ] {
        let bytes = std::fs::read(a.join(name)).unwrap();
        assert_eq!(ma.files.get(name), Some(&sha256_hex(&bytes)), "{name}");
    }
    assert_eq!(without_config(&ma), without_config(&mb), "two runs of the same config differ");

    // Heatmap: one row per (ratio, budget) cell, rates in [0, 1].
    let mut rdr = csv::Reader::from_path(a.join("heatmap.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    let (psr, bler) = (col("psr"), col("bler"));
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 50);
    for r in &rows {
        for c in [psr, bler] {
            let v: f64 = r[c].parse().unwrap();
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    let clean = std::fs::read(a.join("attack_clean.bin")).unwrap();
    assert_eq!(clean.len(), 6 * 960 * 8);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config();
    c.training.epochs = 1;
    let cfg = write_config(dir.path(), &c);
    let one = dir.path().join("one");
    let two = dir.path().join("two");
    ok(&run(&["gen-dataset", "--jobs", "1"], &cfg, &one));
    ok(&run(&["train", "--jobs", "1"], &cfg, &one));
    ok(&run(&["gen-dataset", "--jobs", "3"], &cfg, &two));
    ok(&run(&["train", "--jobs", "3"], &cfg, &two));
    assert_eq!(without_config(&manifest(&one)), without_config(&manifest(&two)));
}

#[test]
fn zero_budget_attack_leaves_tensors_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config();
    c.training.epochs = 1;
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &c);
    ok(&run(&["gen-dataset"], &cfg, &out));
    ok(&run(&["train"], &cfg, &out));

    c.attack.epsilon = 0.0;
    let cfg0 = write_config(dir.path(), &c);
    ok(&run(&["attack", "--samples", "0..8"], &cfg0, &out));
    assert_eq!(std::fs::read(out.join("attack_clean.bin")).unwrap(), std::fs::read(out.join("attack_perturbed.bin")).unwrap());
}

#[test]
fn over_budget_attack_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config();
    c.training.epochs = 1;
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &c);
    ok(&run(&["gen-dataset"], &cfg, &out));
    ok(&run(&["train"], &cfg, &out));
    c.attack.epsilon = 0.1;
    c.attack.power_cap = 0.001;
    let cfg = write_config(dir.path(), &c);
    let o = run(&["attack"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
