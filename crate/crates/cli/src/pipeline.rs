//! Stages shared by `run` and `ablate`: load subjects, preprocess and window
//! them one at a time, split by subject, then train and score every model on
//! every modality.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use hypowatch_core::classical::{train_classical, ClassWeights, ClassicalSpec};
use hypowatch_core::dataset::{
    assemble_batch, leave_one_subject_out, make_windows, split_subjects, Modality, Partition, SequenceBatch, SplitPlan,
    Window,
};
use hypowatch_core::eval::{evaluate, tune_threshold, MetricsReport};
use hypowatch_core::features::feature_matrix_with;
use hypowatch_core::fusion::{fit_stack, fit_weight, FittedFusion, LateFusion};
use hypowatch_core::ingest::{
    leakage_guard, parse_csv_bundle, parse_ohio_xml, read_manifest, LeakageViolation, SubjectBundle,
};
use hypowatch_core::preprocess::preprocess_subject;
use hypowatch_core::synthgen::simulate_cohort;
use hypowatch_nn::{build, Family, History, Init, ModelSpec, NnError, Weighting};

use crate::config::{
    DataSource, FusionRule, ModalitySel, ModelKind, RunConfig, SplitMode, ThresholdPolicy, LATE_FUSION_NAME,
};
use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub windows: usize,
    pub hypo_windows: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub subjects: BTreeMap<String, SubjectSummary>,
    pub windows: usize,
    pub hypo_windows: usize,
    pub prevalence: f64,
    /// Event-rate multiplier used when the synthetic cohort was regenerated.
    pub rate_adjustment: Option<f64>,
}

/// Windows of every subject plus bookkeeping; raw signals are not kept.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub windows: Vec<Window>,
    pub summary: CohortSummary,
    pub notes: Vec<String>,
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.csv")
    } else {
        p.to_path_buf()
    }
}

/// Load, preprocess and window all subjects, dropping raw signals as soon as
/// each subject is windowed.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let mut p = Prepared { windows: Vec::new(), summary: CohortSummary::default(), notes: Vec::new() };
    let add = |b: SubjectBundle, p: &mut Prepared| -> Result<(), CliError> {
        let pre = preprocess_subject(&b, &cfg.preprocess).map_err(|e| CliError::Pipeline(e.to_string()))?;
        drop(b);
        let w = make_windows(&pre.channels, &pre.cgm, &cfg.window).map_err(|e| CliError::Pipeline(e.to_string()))?;
        let hypo = w.iter().filter(|w| w.label.is_hypo()).count();
        p.summary.subjects.insert(pre.subject_id.clone(), SubjectSummary { windows: w.len(), hypo_windows: hypo });
        p.windows.extend(w);
        Ok(())
    };
    match cfg.data.source {
        DataSource::Synthetic => {
            let seed = cfg.data.seed.expect("resolved config");
            let cohort = simulate_cohort(&cfg.data.sim, cfg.data.subjects, seed).map_err(|e| CliError::Config(e.to_string()))?;
            p.summary.rate_adjustment = cohort.rate_adjustment;
            for b in cohort.bundles {
                add(b, &mut p)?;
            }
        }
        DataSource::Csv => {
            let path = manifest_path(cfg.data.path.as_deref().expect("resolved config"));
            let manifests = read_manifest(&path).map_err(|e| CliError::Pipeline(e.to_string()))?;
            for m in &manifests {
                let b = parse_csv_bundle(m).map_err(|e| CliError::Pipeline(e.to_string()))?;
                add(b, &mut p)?;
            }
        }
        DataSource::Ohio => {
            let dir = cfg.data.path.as_deref().expect("resolved config");
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("xml")))
                .collect();
            files.sort();
            for f in files {
                let b = parse_ohio_xml(&f).map_err(|e| CliError::Pipeline(format!("{}: {e}", f.display())))?;
                add(b, &mut p)?;
            }
        }
    }
    if p.windows.is_empty() {
        return Err(CliError::Pipeline("no complete windows in the input".into()));
    }
    p.summary.windows = p.windows.len();
    p.summary.hypo_windows = p.windows.iter().filter(|w| w.label.is_hypo()).count();
    p.summary.prevalence = p.summary.hypo_windows as f64 / p.summary.windows as f64;
    Ok(p)
}

/// Build the split plans and run the leakage guard on each.
pub fn plan_splits(cfg: &RunConfig, summary: &CohortSummary) -> Result<Vec<SplitPlan>, CliError> {
    let ids: Vec<String> = summary.subjects.keys().cloned().collect();
    let seed = cfg.split.seed.expect("resolved config");
    let plans = match cfg.split.mode {
        SplitMode::Loso => leave_one_subject_out(&ids, seed),
        SplitMode::Stratified if ids.len() < 3 => leave_one_subject_out(&ids, seed),
        SplitMode::Stratified => {
            let prev: BTreeMap<String, f64> = summary
                .subjects
                .iter()
                .map(|(s, c)| (s.clone(), c.hypo_windows as f64 / c.windows.max(1) as f64))
                .collect();
            vec![split_subjects(&ids, Some(&prev), cfg.split.fractions, seed).map_err(|e| CliError::Config(e.to_string()))?]
        }
        SplitMode::Explicit => {
            let set = |v: &[String]| v.iter().cloned().collect::<BTreeSet<_>>();
            vec![SplitPlan {
                train: set(&cfg.split.train),
                val: set(&cfg.split.val),
                test: set(&cfg.split.test),
                seed,
                fractions: cfg.split.fractions,
                fallback: cfg.split.val.is_empty(),
            }]
        }
    };
    let known: BTreeSet<&String> = ids.iter().collect();
    for plan in &plans {
        let mut violations = leakage_guard(&[], plan).err().unwrap_or_default();
        for s in plan.train.iter().chain(&plan.val).chain(&plan.test) {
            if !known.contains(s) {
                violations.push(LeakageViolation::UnknownSubject(s.clone()));
            }
        }
        if !violations.is_empty() {
            return Err(CliError::Leakage(violations));
        }
    }
    Ok(plans)
}

/// Windows of one partition, in input order.
fn partition<'a>(windows: &'a [Window], plan: &SplitPlan, p: Partition) -> Vec<&'a Window> {
    windows.iter().filter(|w| plan.partition_of(&w.subject_id) == Some(p)).collect()
}

fn owned(ws: &[&Window]) -> Vec<Window> {
    ws.iter().map(|w| (*w).clone()).collect()
}

fn labels(ws: &[&Window]) -> Vec<f64> {
    ws.iter().map(|w| w.label.as_f64()).collect()
}

/// Model inputs of one partition: feature rows or a sequence batch.
enum Inputs {
    Features(Vec<Vec<f64>>),
    Sequence(SequenceBatch),
}

fn inputs(cfg: &RunConfig, kind: ModelKind, ws: &[&Window], m: Modality) -> Result<Option<Inputs>, CliError> {
    if ws.is_empty() {
        return Ok(None);
    }
    let ws = owned(ws);
    let out = if kind.uses_features() {
        let fm = feature_matrix_with(&ws, m, &cfg.features).map_err(|e| CliError::Pipeline(e.to_string()))?;
        Inputs::Features(fm.rows)
    } else {
        Inputs::Sequence(assemble_batch(&ws, m).map_err(|e| CliError::Pipeline(e.to_string()))?)
    };
    Ok(Some(out))
}

/// Feature rows as a `(n, features, 1)` batch for the MLP.
fn rows_as_batch(rows: &[Vec<f64>], labels: &[f64]) -> SequenceBatch {
    let nf = rows.first().map_or(0, Vec::len);
    SequenceBatch { n: rows.len(), channels: nf, length: 1, data: rows.concat(), labels: labels.to_vec() }
}

/// Predictions and the serialized model of one model x modality x fold.
pub struct CellOutput {
    pub val: Option<(Vec<f64>, Vec<f64>)>,
    pub train: Option<(Vec<f64>, Vec<f64>)>,
    pub test: (Vec<f64>, Vec<f64>),
    pub document: String,
    pub history: Option<History>,
}

pub fn classical_spec(cfg: &RunConfig, kind: ModelKind) -> Option<ClassicalSpec> {
    let c = &cfg.classical;
    Some(match kind {
        ModelKind::Lr => ClassicalSpec::Logistic(c.lr.clone()),
        ModelKind::Knn => ClassicalSpec::Knn(c.knn.clone()),
        ModelKind::Rf => ClassicalSpec::Forest(c.rf.clone()),
        ModelKind::Gbt => ClassicalSpec::Gbt(c.gbt.clone()),
        ModelKind::Net(_) => return None,
    })
}

fn net_spec(cfg: &RunConfig, family: Family, in_channels: usize, seq_len: usize) -> ModelSpec {
    let t = &cfg.temporal;
    ModelSpec {
        hidden: t.hidden,
        cnn: t.cnn.clone(),
        tcn: t.tcn.clone(),
        mlp: t.mlp.clone(),
        ..ModelSpec::new(family, in_channels, seq_len)
    }
}

/// Train one model on one modality of one fold. `want_train` also scores
/// the training partition (needed to fit late fusion without validation).
pub fn train_cell(
    cfg: &RunConfig,
    kind: ModelKind,
    m: Modality,
    windows: &[Window],
    plan: &SplitPlan,
    want_train: bool,
) -> Result<CellOutput, CliError> {
    let (tr_w, va_w, te_w) = (
        partition(windows, plan, Partition::Train),
        partition(windows, plan, Partition::Val),
        partition(windows, plan, Partition::Test),
    );
    let (y_tr, y_va, y_te) = (labels(&tr_w), labels(&va_w), labels(&te_w));
    let empty = |p: &str| CliError::Pipeline(format!("{p} partition has no complete windows"));
    let tr = inputs(cfg, kind, &tr_w, m)?.ok_or_else(|| empty("train"))?;
    let te = inputs(cfg, kind, &te_w, m)?.ok_or_else(|| empty("test"))?;
    let va = inputs(cfg, kind, &va_w, m)?;
    let seed = cfg.model_seed(kind, m);
    let diverged = |e: NnError| match e {
        NnError::Diverged { epoch } => CliError::Diverged { model: kind.name().into(), modality: m.display_name().into(), epoch },
        other => CliError::Pipeline(other.to_string()),
    };

    if let Some(spec) = classical_spec(cfg, kind) {
        let (Inputs::Features(x_tr), Inputs::Features(x_te)) = (tr, te) else { unreachable!("classical models use features") };
        let x_va = match va {
            Some(Inputs::Features(x)) => Some(x),
            _ => None,
        };
        let weights = match cfg.classical.weighting {
            Weighting::Balanced => ClassWeights::balanced(&y_tr),
            Weighting::Uniform => ClassWeights::UNIFORM,
        };
        let val = x_va.as_deref().map(|x| (x, y_va.as_slice()));
        let fitted = train_classical(&spec, &x_tr, &y_tr, val, weights, seed).map_err(|e| CliError::Pipeline(e.to_string()))?;
        return Ok(CellOutput {
            val: x_va.map(|x| (fitted.predict_proba(&x), y_va.clone())),
            train: want_train.then(|| (fitted.predict_proba(&x_tr), y_tr.clone())),
            test: (fitted.predict_proba(&x_te), y_te),
            document: fitted.to_document().map_err(|e| CliError::Pipeline(e.to_string()))?,
            history: None,
        });
    }

    let ModelKind::Net(family) = kind else { unreachable!() };
    let as_batch = |i: Inputs, y: &[f64]| match i {
        Inputs::Features(rows) => rows_as_batch(&rows, y),
        Inputs::Sequence(b) => b,
    };
    let tr = as_batch(tr, &y_tr);
    let te = as_batch(te, &y_te);
    let va = va.map(|v| as_batch(v, &y_va));
    let spec = net_spec(cfg, family, tr.channels, tr.length);
    spec.validate().map_err(|e| CliError::Config(format!("temporal: {e}")))?;
    let net = build(&spec, seed, Init::Glorot).map_err(|e| CliError::Pipeline(e.to_string()))?;
    let opts = hypowatch_nn::TrainOpts { seed, ..cfg.temporal.train.clone() };
    let (net, history) = hypowatch_nn::train(&net, &tr, va.as_ref(), &opts).map_err(diverged)?;
    let predict = |b: &SequenceBatch| net.predict_proba(b).map_err(|e| CliError::Pipeline(e.to_string()));
    Ok(CellOutput {
        val: match &va {
            Some(b) => Some((predict(b)?, y_va.clone())),
            None => None,
        },
        train: if want_train { Some((predict(&tr)?, y_tr.clone())) } else { None },
        test: (predict(&te)?, y_te),
        document: net.to_document().map_err(|e| CliError::Pipeline(e.to_string()))?,
        history: Some(history),
    })
}

fn threshold(cfg: &RunConfig, val: Option<&(Vec<f64>, Vec<f64>)>) -> Result<f64, CliError> {
    Ok(match (cfg.eval.threshold, val) {
        (ThresholdPolicy::Fixed { value }, _) => value,
        (ThresholdPolicy::TuneOnVal, Some((p, y))) if !p.is_empty() => {
            tune_threshold(p, y).map_err(|e| CliError::Pipeline(e.to_string()))?
        }
        (ThresholdPolicy::TuneOnVal, _) => 0.5,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub model: String,
    pub modality: String,
    pub fold: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// A serialized model to be written under `models/`.
pub struct ModelArtifact {
    pub file_stem: String,
    pub document: String,
}

pub struct Evaluated {
    pub results: Vec<MetricsReport>,
    pub training: Vec<TrainingSummary>,
    pub artifacts: Vec<ModelArtifact>,
    /// Wall-clock seconds per cell, for the run log only.
    pub timings: Vec<(String, f64)>,
}

#[derive(Default)]
struct Pooled {
    probs: Vec<f64>,
    labels: Vec<f64>,
    threshold: Option<f64>,
    flags: Vec<String>,
}

impl Pooled {
    fn push(&mut self, p: &[f64], y: &[f64], thr: f64) {
        self.probs.extend_from_slice(p);
        self.labels.extend_from_slice(y);
        self.threshold.get_or_insert(thr);
    }
}

fn modality_key(sel: ModalitySel) -> &'static str {
    match sel.input() {
        Some(m) => m.as_str(),
        None => "late_fusion",
    }
}

/// Train and score every configured model on every selected modality.
/// Leave-one-subject-out folds are pooled before scoring.
pub fn evaluate_all(cfg: &RunConfig, prepared: &Prepared, plans: &[SplitPlan]) -> Result<Evaluated, CliError> {
    let kinds = cfg.model_kinds()?;
    let late = cfg.modalities.contains(&ModalitySel::LateFusion);
    let mut inputs: Vec<ModalitySel> = cfg.modalities.iter().copied().filter(|s| s.input().is_some()).collect();
    if late {
        for s in [ModalitySel::GsrOnly, ModalitySel::HrOnly] {
            if !inputs.contains(&s) {
                inputs.push(s);
            }
        }
        inputs.sort();
    }
    let mut out = Evaluated { results: Vec::new(), training: Vec::new(), artifacts: Vec::new(), timings: Vec::new() };
    let mut pooled: BTreeMap<(ModalitySel, usize), Pooled> = BTreeMap::new();
    let multi = plans.len() > 1;

    for (fold, plan) in plans.iter().enumerate() {
        let suffix = if multi { format!("_fold{fold}") } else { String::new() };
        for (ki, &kind) in kinds.iter().enumerate() {
            let mut singles: BTreeMap<ModalitySel, CellOutput> = BTreeMap::new();
            for &sel in &inputs {
                let m = sel.input().expect("input modality");
                let started = Instant::now();
                let need_train = late && plan.val.is_empty() && sel != ModalitySel::FusedEarly;
                let cell = train_cell(cfg, kind, m, &prepared.windows, plan, need_train)?;
                let label = format!("{} {}{suffix}", kind.name(), m.as_str());
                out.timings.push((label, started.elapsed().as_secs_f64()));
                let thr = threshold(cfg, cell.val.as_ref())?;
                pooled.entry((sel, ki)).or_default().push(&cell.test.0, &cell.test.1, thr);
                if let Some(h) = &cell.history {
                    out.training.push(TrainingSummary {
                        model: kind.name().into(),
                        modality: m.display_name().into(),
                        fold,
                        epochs_run: h.train_loss.len(),
                        best_epoch: h.best_epoch,
                        stopped_early: h.stopped_early,
                    });
                }
                out.artifacts.push(ModelArtifact {
                    file_stem: format!("{}_{}{suffix}", kind.name(), m.as_str()),
                    document: cell.document.clone(),
                });
                singles.insert(sel, cell);
            }
            if late {
                let g = &singles[&ModalitySel::GsrOnly];
                let h = &singles[&ModalitySel::HrOnly];
                let (fit_on, (pg, y), ph) = match (&g.val, &h.val) {
                    (Some(gv), Some(hv)) if !gv.0.is_empty() => (Partition::Val, gv, &hv.0),
                    _ => {
                        let gt = g.train.as_ref().expect("train scores requested without validation");
                        let ht = h.train.as_ref().expect("train scores requested without validation");
                        (Partition::Train, gt, &ht.0)
                    }
                };
                let rule = match cfg.fusion {
                    FusionRule::Weighted => LateFusion::WeightedAverage {
                        w: fit_weight(pg, ph, y).map_err(|e| CliError::Pipeline(e.to_string()))?,
                    },
                    FusionRule::Stack => fit_stack(pg, ph, y).map_err(|e| CliError::Pipeline(e.to_string()))?,
                };
                let fitted = FittedFusion { rule, fit_partition: fit_on };
                let fused_fit = fitted.apply(pg, ph, fit_on).map_err(|e| CliError::Pipeline(e.to_string()))?;
                let thr = threshold(cfg, Some(&(fused_fit.probs, y.clone())))?;
                let fused = fitted.apply(&g.test.0, &h.test.0, Partition::Test).map_err(|e| CliError::Pipeline(e.to_string()))?;
                let cell = pooled.entry((ModalitySel::LateFusion, ki)).or_default();
                cell.push(&fused.probs, &g.test.1, thr);
                cell.flags.extend(fused.leakage);
                let doc = serde_json::to_string_pretty(&fitted).map_err(|e| CliError::Pipeline(e.to_string()))?;
                out.artifacts.push(ModelArtifact { file_stem: format!("{}_late_fusion{suffix}", kind.name()), document: doc });
            }
        }
    }

    for sel in &cfg.modalities {
        for (ki, kind) in kinds.iter().enumerate() {
            let Some(p) = pooled.remove(&(*sel, ki)) else { continue };
            let modality = match sel.input() {
                Some(m) => m.display_name(),
                None => LATE_FUSION_NAME,
            };
            let mut r = evaluate(kind.name(), modality, &p.probs, &p.labels, p.threshold.unwrap_or(0.5), Some(&cfg.eval.bootstrap))
                .map_err(|e| CliError::Pipeline(e.to_string()))?;
            r.flags.extend(p.flags);
            if multi {
                r.flags.push(format!("pooled over {} leave-one-subject-out folds", plans.len()));
            }
            out.results.push(r);
        }
    }
    Ok(out)
}

pub fn table_file_stem(sel: ModalitySel) -> &'static str {
    modality_key(sel)
}
