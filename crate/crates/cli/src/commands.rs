//! The `simulate`, `run`, `ablate` and `report` commands and the artifacts
//! they write. Every file carries the resolved-config hash in its header.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use hypowatch_core::dataset::Modality;
use hypowatch_core::eval::{
    best_per_modality, render_table, report_tables, results_from_csv, results_to_csv, write_table_csv, MetricsReport,
    BEST_HEADER, REFERENCE_RESULTS, TABLE_HEADER,
};
use hypowatch_core::ingest::{write_csv_bundle, write_manifest};
use hypowatch_core::synthgen::{simulate_cohort, write_truth_csv};

use crate::config::{DataSource, ModalitySel, RunConfig, LATE_FUSION_NAME};
use crate::pipeline::{evaluate_all, plan_splits, prepare, table_file_stem, CohortSummary, TrainingSummary};
use crate::CliError;

pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "resolved_config.toml";
pub const HASH_PREFIX: &str = "config-hash: ";

/// Relative F1-score change of the best fused-early model over the best
/// single-modality model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionGain {
    pub fused_f1: f64,
    pub best_single_f1: f64,
    pub best_single_modality: String,
    /// `(fused - single) / single`; absent when the single F1 is zero.
    pub relative_change: Option<f64>,
    /// Published relative improvement range, as an annotation only.
    pub reference_range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRow {
    pub modality: String,
    pub model: String,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

/// Published per-model scores for the models that ran, as an annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub model: String,
    pub modality: String,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub command: String,
    pub cohort: CohortSummary,
    pub splits: Vec<SplitSummary>,
    pub results: Vec<MetricsReport>,
    pub training: Vec<TrainingSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_per_modality: Option<Vec<BestRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_gain: Option<FusionGain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<ReferenceRow>>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn result(&self, model: &str, modality: &str) -> Option<&MetricsReport> {
        self.results.iter().find(|r| r.model == model && r.modality == modality)
    }
}

const REFERENCE_GAIN: (f64, f64) = (0.45, 0.70);

/// Present iff both single modalities ran and fused-early results exist.
pub fn fusion_gain(results: &[MetricsReport]) -> Option<FusionGain> {
    let best = best_per_modality(results);
    let g = best.get(Modality::GsrOnly.display_name())?;
    let h = best.get(Modality::HrOnly.display_name())?;
    let f = best.get(Modality::FusedEarly.display_name())?;
    let single = if h.f1 > g.f1 { h } else { g };
    Some(FusionGain {
        fused_f1: f.f1,
        best_single_f1: single.f1,
        best_single_modality: single.modality.clone(),
        relative_change: (single.f1 > 0.0).then(|| (f.f1 - single.f1) / single.f1),
        reference_range: REFERENCE_GAIN,
    })
}

fn best_rows(results: &[MetricsReport]) -> Vec<BestRow> {
    best_per_modality(results)
        .into_values()
        .map(|r| BestRow { modality: r.modality.clone(), model: r.model.clone(), recall: r.recall, f1: r.f1, auc: r.auc })
        .collect()
}

fn reference_rows(results: &[MetricsReport]) -> Vec<ReferenceRow> {
    REFERENCE_RESULTS
        .iter()
        .filter(|(m, md, ..)| results.iter().any(|r| r.model == *m && r.modality == *md))
        .map(|&(model, modality, recall, f1, auc)| ReferenceRow {
            model: model.into(),
            modality: modality.into(),
            recall,
            f1,
            auc,
        })
        .collect()
}

/// Resolved config with the output directory filled from, in order, the
/// explicit argument, the config file and `hypowatch-out`.
pub fn output_dir(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("hypowatch-out"))
}

fn write_config(cfg: &RunConfig, hash: &str, out: &Path) -> Result<(), CliError> {
    let text = format!("# {HASH_PREFIX}{hash}\n{}", cfg.to_toml()?);
    fs::write(out.join(CONFIG_FILE), text)?;
    Ok(())
}

/// Text printed by `--dry-run`: the resolved config and the planned stages.
pub fn dry_run(cfg: &RunConfig, command: &str, out: &Path) -> Result<String, CliError> {
    let cfg = prepare_config(cfg.clone(), command)?;
    let hash = cfg.hash()?;
    let mut s = format!("# {HASH_PREFIX}{hash}\n{}\n", cfg.to_toml()?);
    s.push_str(&format!("planned stages for `{command}` into {}:\n", out.display()));
    let source = match cfg.data.source {
        DataSource::Synthetic => format!("simulate {} synthetic subjects", cfg.data.subjects),
        DataSource::Csv => "ingest csv bundles".into(),
        DataSource::Ohio => "ingest per-patient XML".into(),
    };
    let mut stages = vec![source];
    if command != "simulate" {
        stages.push("preprocess and window each subject".into());
        stages.push(format!("split subjects ({:?})", cfg.split.mode));
        for m in &cfg.modalities {
            for k in &cfg.models {
                stages.push(format!("train and evaluate {k} on {}", table_file_stem(*m)));
            }
        }
        stages.push("write report.json, tables/, models/".into());
    }
    for (i, st) in stages.iter().enumerate() {
        s.push_str(&format!("  {}. {st}\n", i + 1));
    }
    Ok(s)
}

fn prepare_config(mut cfg: RunConfig, command: &str) -> Result<RunConfig, CliError> {
    if command == "ablate" {
        cfg.modalities = ModalitySel::ALL.to_vec();
    }
    let cfg = cfg.resolve()?;
    if cfg.modalities.contains(&ModalitySel::LateFusion) && cfg.modalities.iter().all(|m| m.input().is_none()) {
        return Err(CliError::Config("modalities: late_fusion needs at least one input modality".into()));
    }
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub config_hash: String,
    pub subjects: Vec<String>,
    pub prevalence: f64,
    pub rate_adjustment: Option<f64>,
}

/// Write a synthetic cohort as csv bundles plus `manifest.csv` and
/// `truth.csv`.
pub fn cmd_simulate(cfg: RunConfig, out: &Path) -> Result<SimulateSummary, CliError> {
    let cfg = cfg.resolve()?;
    let hash = cfg.hash()?;
    let seed = cfg.data.seed.expect("resolved config");
    let cohort = simulate_cohort(&cfg.data.sim, cfg.data.subjects, seed).map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(out)?;
    let mut manifests = Vec::new();
    for b in &cohort.bundles {
        manifests.push(write_csv_bundle(b, &out.join(&b.subject_id)).map_err(|e| CliError::Pipeline(e.to_string()))?);
    }
    write_manifest(&out.join("manifest.csv"), &manifests).map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut truth = BufWriter::new(File::create(out.join("truth.csv"))?);
    write_truth_csv(&cohort.truths, &mut truth).map_err(|e| CliError::Pipeline(e.to_string()))?;
    truth.flush()?;
    write_config(&cfg, &hash, out)?;
    Ok(SimulateSummary {
        config_hash: hash,
        subjects: cohort.bundles.iter().map(|b| b.subject_id.clone()).collect(),
        prevalence: cohort.prevalence,
        rate_adjustment: cohort.rate_adjustment,
    })
}

/// Full pipeline. `command` is `run` or `ablate`; the latter forces every
/// modality including late fusion and adds the best-per-modality summary
/// and the fusion-gain statistic.
pub fn cmd_run(cfg: RunConfig, command: &str, out: &Path) -> Result<Report, CliError> {
    let cfg = prepare_config(cfg, command)?;
    let hash = cfg.hash()?;
    let started = Instant::now();
    let prepared = prepare(&cfg)?;
    let plans = plan_splits(&cfg, &prepared.summary)?;
    let prep_s = started.elapsed().as_secs_f64();
    log::info!("{} windows from {} subjects in {prep_s:.1}s", prepared.summary.windows, prepared.summary.subjects.len());
    let ev = evaluate_all(&cfg, &prepared, &plans)?;

    let ablate = command == "ablate";
    let singles_ran = [ModalitySel::GsrOnly, ModalitySel::HrOnly].iter().all(|m| cfg.modalities.contains(m));
    let report = Report {
        config_hash: hash.clone(),
        command: command.to_string(),
        cohort: prepared.summary,
        splits: plans
            .iter()
            .map(|p| SplitSummary {
                train: p.train.iter().cloned().collect(),
                val: p.val.iter().cloned().collect(),
                test: p.test.iter().cloned().collect(),
                fallback: p.fallback,
            })
            .collect(),
        training: ev.training,
        best_per_modality: ablate.then(|| best_rows(&ev.results)),
        fusion_gain: if ablate && singles_ran { fusion_gain(&ev.results) } else { None },
        reference: ablate.then(|| reference_rows(&ev.results)),
        results: ev.results,
        notes: prepared.notes,
    };

    fs::create_dir_all(out.join("tables"))?;
    fs::create_dir_all(out.join("models"))?;
    write_config(&cfg, &hash, out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    write_tables(&report, out)?;
    for a in &ev.artifacts {
        let doc: serde_json::Value = serde_json::from_str(&a.document).map_err(|e| CliError::Pipeline(e.to_string()))?;
        let wrapped = serde_json::json!({ "config_hash": hash, "model": doc });
        write_json(&out.join("models").join(format!("{}.model.json", a.file_stem)), &wrapped)?;
    }
    let mut log = format!("# {HASH_PREFIX}{hash}\npreprocess+split {prep_s:.2}s\n");
    for (cell, s) in &ev.timings {
        log.push_str(&format!("{cell} {s:.2}s\n"));
    }
    log.push_str(&format!("total {:.2}s\n", started.elapsed().as_secs_f64()));
    fs::write(out.join("run_log.txt"), log)?;
    print!("{}", render_report(&report)?);
    Ok(report)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| CliError::Pipeline(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_tables(report: &Report, out: &Path) -> Result<(), CliError> {
    let comment = format!("{HASH_PREFIX}{}", report.config_hash);
    let dir = out.join("tables");
    let tables = report_tables(&report.results).map_err(|e| CliError::Pipeline(e.to_string()))?;
    for sel in ModalitySel::ALL {
        let name = sel.input().map_or(LATE_FUSION_NAME, Modality::display_name);
        if let Some(rows) = tables.by_modality.get(name) {
            let f = File::create(dir.join(format!("{}.csv", table_file_stem(sel))))?;
            write_table_csv(&TABLE_HEADER, rows, Some(&comment), BufWriter::new(f)).map_err(|e| CliError::Pipeline(e.to_string()))?;
        }
    }
    let f = File::create(dir.join("results.csv"))?;
    results_to_csv(&report.results, Some(&comment), BufWriter::new(f)).map_err(|e| CliError::Pipeline(e.to_string()))?;
    if report.best_per_modality.is_some() {
        let f = File::create(dir.join("best_per_modality.csv"))?;
        write_table_csv(&BEST_HEADER, &tables.best, Some(&comment), BufWriter::new(f)).map_err(|e| CliError::Pipeline(e.to_string()))?;
    }
    Ok(())
}

/// Per-modality tables, then the summary and fusion gain when present.
pub fn render_report(report: &Report) -> Result<String, CliError> {
    let tables = report_tables(&report.results).map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut s = String::new();
    for sel in ModalitySel::ALL {
        let name = sel.input().map_or(LATE_FUSION_NAME, Modality::display_name);
        if let Some(rows) = tables.by_modality.get(name) {
            s.push_str(&render_table(name, &TABLE_HEADER, rows));
            s.push('\n');
        }
    }
    if report.best_per_modality.is_some() {
        s.push_str(&render_table("Best model per modality", &BEST_HEADER, &tables.best));
        s.push('\n');
    }
    if let Some(g) = &report.fusion_gain {
        let change = g.relative_change.map_or("NA".to_string(), |c| format!("{:+.1}%", 100.0 * c));
        s.push_str(&format!(
            "Fusion gain: fused F1 {:.4} vs best single ({}) {:.4}: {change} (reference {:.0}-{:.0}%)\n",
            g.fused_f1,
            g.best_single_modality,
            g.best_single_f1,
            100.0 * g.reference_range.0,
            100.0 * g.reference_range.1
        ));
    }
    Ok(s)
}

/// Hash on the first `# config-hash:` header line of a text artifact.
fn header_hash(text: &str) -> Option<&str> {
    text.lines().next()?.strip_prefix("# ")?.strip_prefix(HASH_PREFIX).map(str::trim)
}

/// Re-render the tables of a finished run after checking that every
/// artifact in the directory comes from the same resolved config.
pub fn cmd_report(out: &Path) -> Result<Report, CliError> {
    let text = fs::read_to_string(out.join(REPORT_FILE))
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", out.join(REPORT_FILE).display())))?;
    let report: Report = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("report.json: {e}")))?;
    let expect = report.config_hash.as_str();
    let mismatch = |what: &Path, got: &str| {
        CliError::Config(format!("{} has config hash {got}, report.json has {expect}", what.display()))
    };

    let cfg_path = out.join(CONFIG_FILE);
    let cfg_text = fs::read_to_string(&cfg_path)?;
    let got = header_hash(&cfg_text).unwrap_or("");
    if got != expect {
        return Err(mismatch(&cfg_path, got));
    }
    let recomputed = RunConfig::from_toml(&cfg_text)?.resolve()?.hash()?;
    if recomputed != expect {
        return Err(mismatch(&cfg_path, &recomputed));
    }
    for entry in sorted_entries(&out.join("tables"))? {
        let text = fs::read_to_string(&entry)?;
        let got = header_hash(&text).unwrap_or("");
        if got != expect {
            return Err(mismatch(&entry, got));
        }
    }
    for entry in sorted_entries(&out.join("models"))? {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&entry)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", entry.display())))?;
        let got = v.get("config_hash").and_then(|h| h.as_str()).unwrap_or("");
        if got != expect {
            return Err(mismatch(&entry, got));
        }
    }
    let csv_results = results_from_csv(File::open(out.join("tables").join("results.csv"))?)
        .map_err(|e| CliError::Config(format!("results.csv: {e}")))?;
    if csv_results != report.results {
        return Err(CliError::Config("tables/results.csv disagrees with report.json".into()));
    }
    print!("{}", render_report(&report)?);
    Ok(report)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
    v.sort();
    Ok(v)
}
