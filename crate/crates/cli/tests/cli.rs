//! End-to-end checks of the `hypowatch` binary and the command functions on
//! small cohorts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hypowatch_cli::config::ModalitySel;
use hypowatch_cli::{cmd_report, cmd_run, cmd_simulate, RunConfig};

const SMALL: &str = "models = [\"LR\"]\n\
[data]\nsubjects = 4\n\
[data.sim]\ndays = 2.0\nprevalence_band = [0.0, 1.0]\n\
[temporal.train]\nmax_epochs = 2\n";

fn small() -> RunConfig {
    RunConfig::from_toml(SMALL).unwrap()
}

fn hypowatch(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypowatch")).args(args).current_dir(dir).output().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = hypowatch(&["run", "--config", "small.toml", "--out", "out", "--dry-run"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("# config-hash: "));
    assert!(text.contains("train and evaluate LR on gsr_only"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "no_such_field = 1\n").unwrap();
    let o = hypowatch(&["run", "--config", "bad.toml", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.path().join("neg.toml"), "[data.sim.events]\nrate_per_day = -1.0\n").unwrap();
    let o = hypowatch(&["simulate", "--config", "neg.toml", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("events.rate_per_day"));
}

#[test]
fn default_simulate_writes_twelve_subjects_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_simulate(RunConfig::default(), &dir.path().join("a")).unwrap();
    assert_eq!(a.subjects.len(), 12);
    for s in &a.subjects {
        assert!(dir.path().join("a").join(s).is_dir());
    }
    assert!((0.02..=0.06).contains(&a.prevalence));
    let o = hypowatch(&["simulate", "--out", "b"], dir.path());
    assert!(o.status.success());
    assert_eq!(tree(&dir.path().join("a")), tree(&dir.path().join("b")));
}

#[test]
fn run_writes_one_row_per_model_and_modality_and_report_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = small();
    cfg.models = vec!["LR".into(), "GBT".into(), "LSTM".into()];
    let report = cmd_run(cfg, "run", &out).unwrap();
    assert_eq!(report.results.len(), 9);
    assert!(report.best_per_modality.is_none());
    for stem in ["gsr_only", "hr_only", "fused_early", "results"] {
        assert!(out.join("tables").join(format!("{stem}.csv")).is_file(), "{stem}");
    }
    assert_eq!(fs::read_dir(out.join("models")).unwrap().count(), 9);
    assert_eq!(cmd_report(&out).unwrap().results, report.results);

    // A model file from a different configuration is rejected.
    let other = dir.path().join("other");
    let mut cfg = small();
    cfg.seed = 9;
    cmd_run(cfg, "run", &other).unwrap();
    let name = fs::read_dir(other.join("models")).unwrap().next().unwrap().unwrap().file_name();
    fs::copy(other.join("models").join(&name), out.join("models").join(&name)).unwrap();
    let err = cmd_report(&out).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("config hash"));
}

#[test]
fn ablate_summarizes_every_modality() {
    let dir = tempfile::tempdir().unwrap();
    let r = cmd_run(small(), "ablate", dir.path()).unwrap();
    assert_eq!(r.results.len(), 4);
    let best = r.best_per_modality.as_ref().unwrap();
    assert_eq!(best.len(), 4);
    assert!(r.fusion_gain.is_some());
    assert!(dir.path().join("tables").join("late_fusion.csv").is_file());
    assert!(dir.path().join("tables").join("best_per_modality.csv").is_file());
}

#[test]
fn fusion_gain_needs_both_single_modalities() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.modalities = vec![ModalitySel::FusedEarly, ModalitySel::GsrOnly];
    let r = cmd_run(cfg, "run", dir.path()).unwrap();
    assert_eq!(r.results.len(), 2);
    assert!(r.fusion_gain.is_none());
}

#[test]
fn csv_cohort_round_trips_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    cmd_simulate(small(), &sim).unwrap();
    let mut from_csv = small();
    from_csv.data.source = hypowatch_cli::config::DataSource::Csv;
    from_csv.data.path = Some(sim.clone());
    let a = cmd_run(from_csv, "run", &dir.path().join("csv")).unwrap();
    let b = cmd_run(small(), "run", &dir.path().join("synthetic")).unwrap();
    assert_eq!(a.cohort.windows, b.cohort.windows);
    assert_eq!(a.results.len(), b.results.len());
}
