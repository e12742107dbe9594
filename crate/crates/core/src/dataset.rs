//! Windowing, labeling, subject-level splits and model-ready batches.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSeries, Label};
use crate::rng::rng_from_seed;

/// Glucose strictly below this value (mg/dL) is hypoglycemia.
pub const HYPO_THRESHOLD_MG_DL: f64 = 70.0;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("invalid glucose value {0}")]
    InvalidGlucose(f64),
    #[error("grid series disagree on start or length")]
    GridMismatch,
    #[error("need at least 3 subjects for a fractional split, got {0}")]
    TooFewSubjects(usize),
    #[error("invalid split fractions {0:?}")]
    BadFractions([f64; 3]),
    #[error("window {start_bin} of subject {subject} lacks channel {channel:?}")]
    MissingChannel { subject: String, start_bin: usize, channel: WindowChannel },
    #[error("no windows to assemble")]
    EmptyBatch,
    #[error("window csv: {0}")]
    Csv(String),
}

pub fn label_glucose(mg_dl: f64) -> Result<Label, DatasetError> {
    if !mg_dl.is_finite() || mg_dl <= 0.0 {
        return Err(DatasetError::InvalidGlucose(mg_dl));
    }
    Ok(if mg_dl < HYPO_THRESHOLD_MG_DL { Label::Hypo } else { Label::Normal })
}

/// Per-window channels. Tonic and phasic feed the handcrafted features only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowChannel {
    Gsr,
    Hr,
    Tonic,
    Phasic,
}

impl WindowChannel {
    pub const ALL: [WindowChannel; 4] =
        [WindowChannel::Gsr, WindowChannel::Hr, WindowChannel::Tonic, WindowChannel::Phasic];

    pub fn as_str(self) -> &'static str {
        match self {
            WindowChannel::Gsr => "gsr",
            WindowChannel::Hr => "hr",
            WindowChannel::Tonic => "tonic",
            WindowChannel::Phasic => "phasic",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub length: usize,
    pub stride: usize,
    /// Label taken this many bins after the window's final bin.
    pub horizon_bins: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { length: 12, stride: 1, horizon_bins: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub subject_id: String,
    pub start_bin: usize,
    pub length: usize,
    pub channels: BTreeMap<WindowChannel, Vec<f64>>,
    pub glucose_last: f64,
    pub label: Label,
}

impl Window {
    pub fn channel(&self, c: WindowChannel) -> Option<&[f64]> {
        self.channels.get(&c).map(Vec::as_slice)
    }

    pub fn end_bin(&self) -> usize {
        self.start_bin + self.length - 1
    }
}

/// Slide a window of `cfg.length` bins over aligned channels.
///
/// A candidate is emitted only when every supplied channel is observed over
/// the whole window and the CGM label bin is observed and valid.
pub fn make_windows(
    channels: &BTreeMap<WindowChannel, GridSeries>,
    cgm: &GridSeries,
    cfg: &WindowConfig,
) -> Result<Vec<Window>, DatasetError> {
    let n = cgm.len();
    if channels.values().any(|g| g.len() != n || g.start != cgm.start) {
        return Err(DatasetError::GridMismatch);
    }
    let len = cfg.length.max(1);
    let stride = cfg.stride.max(1);
    let mut out = Vec::new();
    if n < len + cfg.horizon_bins {
        return Ok(out);
    }
    let last_start = n - len - cfg.horizon_bins;
    'cand: for start in (0..=last_start).step_by(stride) {
        let label_bin = start + len - 1 + cfg.horizon_bins;
        let Some(glucose) = cgm.get(label_bin) else { continue };
        let Ok(label) = label_glucose(glucose) else { continue };
        let mut data = BTreeMap::new();
        for (&c, g) in channels {
            let mut v = Vec::with_capacity(len);
            for b in start..start + len {
                match g.get(b) {
                    Some(x) => v.push(x),
                    None => continue 'cand,
                }
            }
            data.insert(c, v);
        }
        out.push(Window {
            subject_id: cgm.subject_id.clone(),
            start_bin: start,
            length: len,
            channels: data,
            glucose_last: glucose,
            label,
        });
    }
    Ok(out)
}

/// Subject-level partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub seed: u64,
    pub fractions: [f64; 3],
    /// Set for leave-one-subject-out folds.
    pub fallback: bool,
}

impl SplitPlan {
    pub fn partition_of(&self, subject: &str) -> Option<Partition> {
        if self.train.contains(subject) {
            Some(Partition::Train)
        } else if self.val.contains(subject) {
            Some(Partition::Val)
        } else if self.test.contains(subject) {
            Some(Partition::Test)
        } else {
            None
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// Partition sizes: validation and test get `max(1, round(f * n))`, train
/// takes the remainder.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> (usize, usize, usize) {
    let val = ((fractions[1] * n as f64).round() as usize).max(1);
    let test = ((fractions[2] * n as f64).round() as usize).max(1);
    (n - val - test, val, test)
}

/// Deterministic stratified subject split.
///
/// Ids are sorted, shuffled with the seeded generator, and (when per-subject
/// hypo prevalence is supplied) stably ranked by prevalence. The ranking is
/// cut into `max(n_val, n_test)` contiguous strata and dealt round-robin, one
/// subject per stratum in turn; test takes the first `n_test` dealt subjects,
/// validation the next `n_val`, train the rest.
pub fn split_subjects(
    ids: &[String],
    prevalence: Option<&BTreeMap<String, f64>>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitPlan, DatasetError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(DatasetError::BadFractions(fractions));
    }
    let mut uniq: Vec<String> = ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let n = uniq.len();
    if n < 3 {
        return Err(DatasetError::TooFewSubjects(n));
    }
    let (n_train, n_val, n_test) = split_sizes(n, fractions);
    debug_assert!(n_train >= 1);

    let mut rng = rng_from_seed(seed);
    uniq.shuffle(&mut rng);
    if let Some(prev) = prevalence {
        let p = |s: &String| prev.get(s).copied().unwrap_or(0.0);
        uniq.sort_by(|a, b| p(b).total_cmp(&p(a)));
    }
    let k = n_val.max(n_test);
    let mut strata: Vec<Vec<String>> = (0..k)
        .map(|s| uniq[s * n / k..(s + 1) * n / k].to_vec())
        .collect();
    for s in &mut strata {
        s.shuffle(&mut rng);
        s.reverse();
    }
    let mut dealt = Vec::with_capacity(n);
    while dealt.len() < n {
        for s in &mut strata {
            if let Some(id) = s.pop() {
                dealt.push(id);
            }
        }
    }
    let test = dealt[..n_test].iter().cloned().collect();
    let val = dealt[n_test..n_test + n_val].iter().cloned().collect();
    let train = dealt[n_test + n_val..].iter().cloned().collect();
    Ok(SplitPlan { train, val, test, seed, fractions, fallback: false })
}

/// Leave-one-subject-out folds: each subject is the test set once, the rest
/// train. Used when there are too few subjects for fractional splitting.
pub fn leave_one_subject_out(ids: &[String], seed: u64) -> Vec<SplitPlan> {
    let uniq: BTreeSet<String> = ids.iter().cloned().collect();
    uniq.iter()
        .map(|held| SplitPlan {
            train: uniq.iter().filter(|s| *s != held).cloned().collect(),
            val: BTreeSet::new(),
            test: BTreeSet::from([held.clone()]),
            seed,
            fractions: [0.0, 0.0, 0.0],
            fallback: true,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    GsrOnly,
    HrOnly,
    FusedEarly,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::GsrOnly, Modality::HrOnly, Modality::FusedEarly];

    /// Sequence channels fed to temporal models, in order.
    pub fn sequence_channels(self) -> &'static [WindowChannel] {
        match self {
            Modality::GsrOnly => &[WindowChannel::Gsr],
            Modality::HrOnly => &[WindowChannel::Hr],
            Modality::FusedEarly => &[WindowChannel::Gsr, WindowChannel::Hr],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::GsrOnly => "gsr_only",
            Modality::HrOnly => "hr_only",
            Modality::FusedEarly => "fused_early",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Modality::GsrOnly => "GSR-only",
            Modality::HrOnly => "HR-only",
            Modality::FusedEarly => "GSR & HR",
        }
    }
}

/// Dense `n x channels x length` batch, row-major, plus 0/1 labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceBatch {
    pub n: usize,
    pub channels: usize,
    pub length: usize,
    pub data: Vec<f64>,
    pub labels: Vec<f64>,
}

impl SequenceBatch {
    pub fn sample(&self, i: usize) -> &[f64] {
        let stride = self.channels * self.length;
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn value(&self, i: usize, c: usize, t: usize) -> f64 {
        self.data[(i * self.channels + c) * self.length + t]
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> SequenceBatch {
        let stride = self.channels * self.length;
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        SequenceBatch {
            n: idx.len(),
            channels: self.channels,
            length: self.length,
            data,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

pub fn assemble_batch(windows: &[Window], m: Modality) -> Result<SequenceBatch, DatasetError> {
    let first = windows.first().ok_or(DatasetError::EmptyBatch)?;
    let chans = m.sequence_channels();
    let length = first.length;
    let mut data = Vec::with_capacity(windows.len() * chans.len() * length);
    for w in windows {
        for &c in chans {
            let v = w.channel(c).ok_or_else(|| DatasetError::MissingChannel {
                subject: w.subject_id.clone(),
                start_bin: w.start_bin,
                channel: c,
            })?;
            data.extend_from_slice(v);
        }
    }
    Ok(SequenceBatch {
        n: windows.len(),
        channels: chans.len(),
        length,
        data,
        labels: windows.iter().map(|w| w.label.as_f64()).collect(),
    })
}

/// Window set as CSV: `subject,start_bin,label,glucose_last` followed by
/// `<channel>_<t>` columns for each present channel in gsr, hr, tonic,
/// phasic order. All windows must carry the same channel set.
pub fn write_windows_csv<W: Write>(windows: &[Window], w: W) -> Result<(), DatasetError> {
    let err = |e: csv::Error| DatasetError::Csv(e.to_string());
    let mut wr = csv::Writer::from_writer(w);
    let chans: Vec<WindowChannel> = windows
        .first()
        .map(|w| w.channels.keys().copied().collect())
        .unwrap_or_default();
    let len = windows.first().map_or(0, |w| w.length);
    let mut header = vec!["subject".to_string(), "start_bin".into(), "label".into(), "glucose_last".into()];
    for c in &chans {
        header.extend((0..len).map(|t| format!("{}_{t}", c.as_str())));
    }
    wr.write_record(&header).map_err(err)?;
    for win in windows {
        let mut rec = vec![
            win.subject_id.clone(),
            win.start_bin.to_string(),
            if win.label.is_hypo() { "1".into() } else { "0".into() },
            format!("{:?}", win.glucose_last),
        ];
        for c in &chans {
            let v = win.channel(*c).ok_or_else(|| DatasetError::MissingChannel {
                subject: win.subject_id.clone(),
                start_bin: win.start_bin,
                channel: *c,
            })?;
            rec.extend(v.iter().map(|x| format!("{x:?}")));
        }
        wr.write_record(&rec).map_err(err)?;
    }
    wr.flush().map_err(|e| DatasetError::Csv(e.to_string()))
}

pub fn read_windows_csv<R: Read>(r: R) -> Result<Vec<Window>, DatasetError> {
    let bad = |m: &str| DatasetError::Csv(m.to_string());
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(|e| DatasetError::Csv(e.to_string()))?.clone();
    let mut cols: Vec<(WindowChannel, usize)> = Vec::new();
    for h in header.iter().skip(4) {
        let (c, t) = h.rsplit_once('_').ok_or_else(|| bad("bad column name"))?;
        let c = WindowChannel::parse(c).ok_or_else(|| bad("unknown channel column"))?;
        let t: usize = t.parse().map_err(|_| bad("bad time index"))?;
        cols.push((c, t));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| DatasetError::Csv(e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad("short row"));
        let glucose_last: f64 = field(3)?.parse().map_err(|_| bad("bad glucose"))?;
        let label = if field(2)? == "1" { Label::Hypo } else { Label::Normal };
        let mut channels: BTreeMap<WindowChannel, Vec<f64>> = BTreeMap::new();
        for (j, &(c, _)) in cols.iter().enumerate() {
            let v: f64 = field(4 + j)?.parse().map_err(|_| bad("bad value"))?;
            channels.entry(c).or_default().push(v);
        }
        let length = channels.values().next().map_or(0, Vec::len);
        out.push(Window {
            subject_id: field(0)?.to_string(),
            start_bin: field(1)?.parse().map_err(|_| bad("bad start_bin"))?,
            length,
            channels,
            glucose_last,
            label,
        });
    }
    Ok(out)
}
