//! Threshold metrics, rank AUC, stratified bootstrap intervals and report
//! tables.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, rng_from_seed};
use crate::signal::quantile_sorted;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{probs} probabilities but {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("no results to report")]
    Empty,
    #[error("invalid bootstrap configuration: {0}")]
    BadConfig(String),
    #[error("csv: {0}")]
    Csv(String),
}

/// Names of the metrics carried in reports and bootstrap intervals.
pub const METRICS: [&str; 5] = ["accuracy", "precision", "recall", "f1", "auc"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Predicted positive iff `prob >= threshold`.
pub fn confusion(probs: &[f64], labels: &[f64], threshold: f64) -> Result<Confusion, EvalError> {
    check_len(probs, labels)?;
    let mut c = Confusion::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn check_len(probs: &[f64], labels: &[f64]) -> Result<(), EvalError> {
    if probs.len() != labels.len() {
        return Err(EvalError::LengthMismatch { probs: probs.len(), labels: labels.len() });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision is 0 when nothing is predicted positive; recall is 0 without
/// positives; F1 is 0 when precision + recall = 0.
pub fn metrics(c: &Confusion) -> Metrics {
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Metrics { accuracy: ratio(c.tp + c.tn, c.total()), precision, recall, f1 }
}

/// Mann-Whitney AUC from average ranks; `None` when a class is absent.
pub fn auc(probs: &[f64], labels: &[f64]) -> Result<Option<f64>, EvalError> {
    check_len(probs, labels)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let counts = vec![1u32; probs.len()];
    Ok(auc_sorted(probs, labels, &order, &counts))
}

/// AUC over a multiset given by `counts`, with `order` sorting `probs`
/// ascending. Ties share the average rank, i.e. count one half per pair.
fn auc_sorted(probs: &[f64], labels: &[f64], order: &[usize], counts: &[u32]) -> Option<f64> {
    let (mut n_pos, mut n_neg) = (0.0f64, 0.0f64);
    // Pairs (pos, neg) with neg strictly below pos, plus half the ties.
    let mut u = 0.0;
    let mut neg_below = 0.0;
    let mut i = 0;
    while i < order.len() {
        let v = probs[order[i]];
        let (mut pos_here, mut neg_here) = (0.0, 0.0);
        while i < order.len() && probs[order[i]] == v {
            let k = order[i];
            let c = counts[k] as f64;
            if labels[k] > 0.5 {
                pos_here += c;
            } else {
                neg_here += c;
            }
            i += 1;
        }
        u += pos_here * neg_below + 0.5 * pos_here * neg_here;
        neg_below += neg_here;
        n_pos += pos_here;
        n_neg += neg_here;
    }
    (n_pos > 0.0 && n_neg > 0.0).then(|| u / (n_pos * n_neg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapCfg {
    pub iterations: usize,
    pub level: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for BootstrapCfg {
    fn default() -> Self {
        Self { iterations: 1000, level: 0.95, stratified: true, seed: 0 }
    }
}

impl BootstrapCfg {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.iterations < 100 {
            return Err(EvalError::BadConfig(format!("iterations = {} (need >= 100)", self.iterations)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(EvalError::BadConfig(format!("level = {}", self.level)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub ci: BTreeMap<String, (f64, f64)>,
    /// Resamples on which a metric was undefined.
    pub skipped: BTreeMap<String, usize>,
}

/// Percentile bootstrap of every metric in [`METRICS`].
///
/// Stratified resampling draws positives and negatives separately, keeping
/// both counts. Iteration `i` uses the stream `derive_seed(seed, i)`, so the
/// result does not depend on evaluation order.
pub fn bootstrap_ci(
    probs: &[f64],
    labels: &[f64],
    threshold: f64,
    cfg: &BootstrapCfg,
) -> Result<BootstrapResult, EvalError> {
    check_len(probs, labels)?;
    cfg.validate()?;
    let n = probs.len();
    let pos: Vec<usize> = (0..n).filter(|&i| labels[i] > 0.5).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| labels[i] <= 0.5).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let predicted: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();

    let mut samples: BTreeMap<&str, Vec<f64>> = METRICS.iter().map(|&m| (m, Vec::new())).collect();
    let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
    let mut counts = vec![0u32; n];
    for it in 0..cfg.iterations {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, it as u64));
        counts.iter_mut().for_each(|c| *c = 0);
        if cfg.stratified {
            for group in [&pos, &neg] {
                for _ in 0..group.len() {
                    counts[group[rng.gen_range(0..group.len())]] += 1;
                }
            }
        } else {
            for _ in 0..n {
                counts[rng.gen_range(0..n)] += 1;
            }
        }
        let mut c = Confusion::default();
        for i in 0..n {
            let k = counts[i] as u64;
            if k == 0 {
                continue;
            }
            match (predicted[i], labels[i] > 0.5) {
                (true, true) => c.tp += k,
                (true, false) => c.fp += k,
                (false, true) => c.fn_ += k,
                (false, false) => c.tn += k,
            }
        }
        let m = metrics(&c);
        samples.get_mut("accuracy").unwrap().push(m.accuracy);
        samples.get_mut("precision").unwrap().push(m.precision);
        if c.tp + c.fn_ > 0 {
            samples.get_mut("recall").unwrap().push(m.recall);
            samples.get_mut("f1").unwrap().push(m.f1);
        } else {
            *skipped.entry("recall".into()).or_default() += 1;
            *skipped.entry("f1".into()).or_default() += 1;
        }
        match auc_sorted(probs, labels, &order, &counts) {
            Some(a) => samples.get_mut("auc").unwrap().push(a),
            None => *skipped.entry("auc".into()).or_default() += 1,
        }
    }
    let alpha = (1.0 - cfg.level) / 2.0;
    let mut ci = BTreeMap::new();
    for (name, mut v) in samples {
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        ci.insert(name.to_string(), (quantile_sorted(&v, alpha), quantile_sorted(&v, 1.0 - alpha)));
    }
    Ok(BootstrapResult { ci, skipped })
}

/// Threshold in `{0.01, ..., 0.99}` maximizing F1; ties go to the value
/// closest to 0.5, then the smaller.
pub fn tune_threshold(probs: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_len(probs, labels)?;
    let mut best: (f64, f64) = (f64::NEG_INFINITY, 0.5);
    for k in 1..100 {
        let t = k as f64 / 100.0;
        let f1 = metrics(&confusion(probs, labels, t)?).f1;
        let closer = (t - 0.5).abs() < (best.1 - 0.5).abs();
        if f1 > best.0 || (f1 == best.0 && closer) {
            best = (f1, t);
        }
    }
    Ok(best.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub modality: String,
    pub threshold: f64,
    pub n_pos: u64,
    pub n_neg: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub ci95: BTreeMap<String, (f64, f64)>,
    pub bootstrap_skipped: BTreeMap<String, usize>,
    /// Provenance warnings, e.g. a stacker scored on its own fit set.
    pub flags: Vec<String>,
}

impl MetricsReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "precision" => Some(self.precision),
            "recall" => Some(self.recall),
            "f1" => Some(self.f1),
            "auc" => self.auc,
            _ => None,
        }
    }
}

/// Point metrics at `threshold` plus bootstrap intervals (skipped when
/// `bootstrap` is `None` or there are fewer than 10 rows).
pub fn evaluate(
    model: &str,
    modality: &str,
    probs: &[f64],
    labels: &[f64],
    threshold: f64,
    bootstrap: Option<&BootstrapCfg>,
) -> Result<MetricsReport, EvalError> {
    let c = confusion(probs, labels, threshold)?;
    let m = metrics(&c);
    let boot = match bootstrap {
        Some(cfg) if probs.len() >= 10 => bootstrap_ci(probs, labels, threshold, cfg)?,
        _ => BootstrapResult::default(),
    };
    Ok(MetricsReport {
        model: model.to_string(),
        modality: modality.to_string(),
        threshold,
        n_pos: c.tp + c.fn_,
        n_neg: c.fp + c.tn,
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        auc: auc(probs, labels)?,
        ci95: boot.ci,
        bootstrap_skipped: boot.skipped,
        flags: Vec::new(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

fn parse_opt(s: &str) -> Result<Option<f64>, EvalError> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| EvalError::Csv(format!("bad number {s:?}")))
    }
}

/// All report fields as CSV, one row per result, lossless.
pub fn results_to_csv<W: Write>(results: &[MetricsReport], header_comment: Option<&str>, w: W) -> Result<(), EvalError> {
    let err = |e: csv::Error| EvalError::Csv(e.to_string());
    let mut w = w;
    if let Some(c) = header_comment {
        writeln!(w, "# {c}").map_err(|e| EvalError::Csv(e.to_string()))?;
    }
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["model", "modality", "threshold", "n_pos", "n_neg"].map(String::from).to_vec();
    header.extend(METRICS.iter().map(|m| m.to_string()));
    for m in METRICS {
        header.push(format!("ci95_{m}_lo"));
        header.push(format!("ci95_{m}_hi"));
    }
    header.extend(METRICS.iter().map(|m| format!("skipped_{m}")));
    header.push("flags".into());
    wr.write_record(&header).map_err(err)?;
    for r in results {
        let mut row = vec![
            r.model.clone(),
            r.modality.clone(),
            format!("{:?}", r.threshold),
            r.n_pos.to_string(),
            r.n_neg.to_string(),
        ];
        row.extend(METRICS.iter().map(|m| fmt_opt(r.metric(m))));
        for m in METRICS {
            let ci = r.ci95.get(m);
            row.push(fmt_opt(ci.map(|c| c.0)));
            row.push(fmt_opt(ci.map(|c| c.1)));
        }
        row.extend(METRICS.iter().map(|m| r.bootstrap_skipped.get(*m).map_or(String::new(), |v| v.to_string())));
        row.push(r.flags.join(";"));
        wr.write_record(&row).map_err(err)?;
    }
    wr.flush().map_err(|e| EvalError::Csv(e.to_string()))
}

pub fn results_from_csv<R: Read>(r: R) -> Result<Vec<MetricsReport>, EvalError> {
    let err = |e: csv::Error| EvalError::Csv(e.to_string());
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let headers = rd.headers().map_err(err)?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| EvalError::Csv(format!("missing column {name}")))
    };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(err)?;
        let get = |name: &str| -> Result<&str, EvalError> { Ok(rec.get(col(name)?).unwrap_or("")) };
        let num = |name: &str| -> Result<f64, EvalError> {
            parse_opt(get(name)?)?.ok_or_else(|| EvalError::Csv(format!("empty {name}")))
        };
        let int = |name: &str| -> Result<u64, EvalError> {
            get(name)?.parse().map_err(|_| EvalError::Csv(format!("bad integer in {name}")))
        };
        let mut ci95 = BTreeMap::new();
        let mut bootstrap_skipped = BTreeMap::new();
        for m in METRICS {
            if let (Some(lo), Some(hi)) = (parse_opt(get(&format!("ci95_{m}_lo"))?)?, parse_opt(get(&format!("ci95_{m}_hi"))?)?) {
                ci95.insert(m.to_string(), (lo, hi));
            }
            let s = get(&format!("skipped_{m}"))?;
            if !s.is_empty() {
                bootstrap_skipped.insert(m.to_string(), s.parse().map_err(|_| EvalError::Csv("bad skip count".into()))?);
            }
        }
        let flags = get("flags")?;
        out.push(MetricsReport {
            model: get("model")?.to_string(),
            modality: get("modality")?.to_string(),
            threshold: num("threshold")?,
            n_pos: int("n_pos")?,
            n_neg: int("n_neg")?,
            accuracy: num("accuracy")?,
            precision: num("precision")?,
            recall: num("recall")?,
            f1: num("f1")?,
            auc: parse_opt(get("auc")?)?,
            ci95,
            bootstrap_skipped,
            flags: if flags.is_empty() { Vec::new() } else { flags.split(';').map(String::from).collect() },
        });
    }
    Ok(out)
}

/// Published reference rows from the restricted real-world cohort
/// (model, modality, recall, F1, AUC). Printed next to run results as
/// annotations; never compared against.
pub const REFERENCE_RESULTS: &[(&str, &str, f64, f64, f64)] = &[
    ("RF", "GSR-only", 0.18, 0.08, 0.61),
    ("GBT", "GSR-only", 0.54, 0.10, 0.71),
    ("LR", "GSR-only", 0.11, 0.05, 0.62),
    ("KNN", "GSR-only", 0.14, 0.06, 0.61),
    ("CNN", "GSR-only", 0.22, 0.09, 0.64),
    ("LSTM", "GSR-only", 0.27, 0.11, 0.72),
    ("GRU", "GSR-only", 0.25, 0.10, 0.70),
    ("TCN", "GSR-only", 0.24, 0.09, 0.69),
    ("RF", "HR-only", 0.20, 0.09, 0.63),
    ("GBT", "HR-only", 0.41, 0.11, 0.68),
    ("LR", "HR-only", 0.16, 0.08, 0.60),
    ("KNN", "HR-only", 0.18, 0.07, 0.61),
    ("CNN", "HR-only", 0.28, 0.10, 0.66),
    ("LSTM", "HR-only", 0.33, 0.12, 0.69),
    ("GRU", "HR-only", 0.32, 0.11, 0.68),
    ("TCN", "HR-only", 0.30, 0.10, 0.70),
    ("RF", "GSR & HR", 0.28, 0.11, 0.69),
    ("GBT", "GSR & HR", 0.56, 0.14, 0.73),
    ("LR", "GSR & HR", 0.20, 0.10, 0.65),
    ("KNN", "GSR & HR", 0.22, 0.09, 0.63),
    ("CNN", "GSR & HR", 0.35, 0.13, 0.71),
    ("LSTM", "GSR & HR", 0.44, 0.16, 0.78),
    ("GRU", "GSR & HR", 0.42, 0.15, 0.76),
    ("TCN", "GSR & HR", 0.39, 0.14, 0.74),
];

pub fn reference_for(model: &str, modality: &str) -> Option<(f64, f64, f64)> {
    REFERENCE_RESULTS
        .iter()
        .find(|r| r.0 == model && r.1 == modality)
        .map(|r| (r.2, r.3, r.4))
}

pub const TABLE_HEADER: [&str; 5] = ["Model", "Recall", "F1-score", "AUC", "95% CI(F1)"];
pub const BEST_HEADER: [&str; 5] = ["Modality", "Best Model", "Recall", "F1-score", "AUC"];

fn ci_text(r: &MetricsReport) -> String {
    r.ci95.get("f1").map_or(String::new(), |(lo, hi)| format!("[{lo:.2}-{hi:.2}]"))
}

/// Per-modality tables (row order as given) and the best-per-modality
/// summary, chosen by F1, then AUC, then model name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTables {
    pub by_modality: BTreeMap<String, Vec<Vec<String>>>,
    pub best: Vec<Vec<String>>,
}

pub fn best_per_modality(results: &[MetricsReport]) -> BTreeMap<String, &MetricsReport> {
    let mut best: BTreeMap<String, &MetricsReport> = BTreeMap::new();
    for r in results {
        let better = match best.get(&r.modality) {
            None => true,
            Some(b) => {
                let (ra, ba) = (r.auc.unwrap_or(0.0), b.auc.unwrap_or(0.0));
                r.f1 > b.f1 || (r.f1 == b.f1 && (ra > ba || (ra == ba && r.model < b.model)))
            }
        };
        if better {
            best.insert(r.modality.clone(), r);
        }
    }
    best
}

pub fn report_tables(results: &[MetricsReport]) -> Result<ReportTables, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut by_modality: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for r in results {
        by_modality.entry(r.modality.clone()).or_default().push(vec![
            r.model.clone(),
            format!("{:.4}", r.recall),
            format!("{:.4}", r.f1),
            r.auc.map_or("NA".into(), |a| format!("{a:.4}")),
            ci_text(r),
        ]);
    }
    let best = best_per_modality(results)
        .into_iter()
        .map(|(m, r)| {
            vec![m, r.model.clone(), format!("{:.4}", r.recall), format!("{:.4}", r.f1), r.auc.map_or("NA".into(), |a| format!("{a:.4}"))]
        })
        .collect();
    Ok(ReportTables { by_modality, best })
}

pub fn write_table_csv<W: Write>(header: &[&str], rows: &[Vec<String>], comment: Option<&str>, mut w: W) -> Result<(), EvalError> {
    if let Some(c) = comment {
        writeln!(w, "# {c}").map_err(|e| EvalError::Csv(e.to_string()))?;
    }
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| EvalError::Csv(e.to_string());
    wr.write_record(header).map_err(err)?;
    for r in rows {
        wr.write_record(r).map_err(err)?;
    }
    wr.flush().map_err(|e| EvalError::Csv(e.to_string()))
}

/// Plain-text rendering of one table for terminal output.
pub fn render_table(title: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let ncol = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(ncol) {
            width[i] = width[i].max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells.iter().enumerate().map(|(i, c)| format!("{c:<w$}", w = width[i])).collect::<Vec<_>>().join("  ")
    };
    let mut out = format!("{title}\n{}\n", line(header.to_vec()));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
