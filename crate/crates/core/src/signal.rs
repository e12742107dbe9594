//! Conditioning of raw channels onto the 5-minute grid: aggregation, gap
//! filling, Butterworth low-pass, outlier masking, median smoothing and
//! per-subject z-normalization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSeries, SampleSeries, TimeInstant, GRID_STEP_S};

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("cutoff {cutoff_hz} Hz is not below the Nyquist frequency of fs = {fs_hz} Hz")]
    CutoffAboveNyquist { cutoff_hz: f64, fs_hz: f64 },
    #[error("zero variance: cannot z-normalize")]
    DegenerateVariance,
    #[error("need at least {needed} observed values, found {found}")]
    TooFewValues { needed: usize, found: usize },
    #[error("invalid filter parameter: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStat {
    #[default]
    Mean,
    Median,
}

/// Causal processing never reads bins after the one being written. Zero-phase
/// (offline) processing may look both ways.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    #[default]
    Causal,
    ZeroPhase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    pub butter_order: usize,
    pub butter_cutoff_hz: f64,
    pub iqr_k: f64,
    pub median_width: usize,
    pub max_ffill_gap_bins: usize,
    pub mode: FilterMode,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            butter_order: 4,
            butter_cutoff_hz: 0.5,
            iqr_k: 1.5,
            median_width: 5,
            max_ffill_gap_bins: 6,
            mode: FilterMode::Causal,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<(), SignalError> {
        if self.butter_order < 1 {
            return Err(SignalError::InvalidParams("butter_order must be >= 1".into()));
        }
        if !(self.butter_cutoff_hz > 0.0) {
            return Err(SignalError::InvalidParams("butter_cutoff_hz must be > 0".into()));
        }
        if !(self.iqr_k >= 0.0) {
            return Err(SignalError::InvalidParams("iqr_k must be >= 0".into()));
        }
        if self.median_width < 3 || self.median_width % 2 == 0 {
            return Err(SignalError::InvalidParams("median_width must be odd and >= 3".into()));
        }
        Ok(())
    }
}

fn median_of(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Quantile of sorted data by linear interpolation between order statistics
/// (position `(n - 1) * q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summarize raw samples per 5-minute bin. Bins without samples are missing;
/// samples outside `[start, start + 300 * n_bins)` are ignored.
pub fn aggregate_to_grid(
    s: &SampleSeries,
    start: TimeInstant,
    n_bins: usize,
    stat: AggregationStat,
) -> GridSeries {
    assert!(n_bins >= 1, "aggregate_to_grid needs at least one bin");
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for &(t, v) in &s.samples {
        let dt = t.seconds() - start.seconds();
        if dt < 0 || !v.is_finite() {
            continue;
        }
        let bin = (dt / GRID_STEP_S) as usize;
        if bin < n_bins {
            buckets[bin].push(v);
        }
    }
    let values: Vec<Option<f64>> = buckets
        .into_iter()
        .map(|mut b| {
            if b.is_empty() {
                None
            } else {
                Some(match stat {
                    AggregationStat::Mean => b.iter().sum::<f64>() / b.len() as f64,
                    AggregationStat::Median => median_of(&mut b),
                })
            }
        })
        .collect();
    GridSeries::from_options(s.subject_id.clone(), s.channel, start, &values)
        .expect("n_bins >= 1")
}

/// Carry the last observation across gaps of at most `max_gap` bins.
///
/// Leading gaps and gaps longer than `max_gap` stay missing. A trailing gap is
/// filled when it is no longer than `max_gap`. Only past values are copied;
/// the gap length decides whether a run is filled.
pub fn forward_fill(g: &GridSeries, max_gap: usize) -> GridSeries {
    let mut out = g.to_options();
    let n = out.len();
    let mut i = 0;
    while i < n {
        if out[i].is_some() {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < n && out[i].is_none() {
            i += 1;
        }
        let run_len = i - run_start;
        if run_start > 0 && run_len <= max_gap {
            let fill = out[run_start - 1];
            for slot in &mut out[run_start..i] {
                *slot = fill;
            }
        }
    }
    g.with_options(&out)
}

/// Mean and sample standard deviation used for z-normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub mean: f64,
    pub sd: f64,
}

impl ZScoreStats {
    /// Fit on observed bins, restricted to `fit_mask[i] == true` when a mask
    /// is supplied (the training period).
    pub fn fit(g: &GridSeries, fit_mask: Option<&[bool]>) -> Result<Self, SignalError> {
        let vals: Vec<f64> = g
            .observed()
            .filter(|&(i, _)| fit_mask.map_or(true, |m| m[i]))
            .map(|(_, v)| v)
            .collect();
        if vals.len() < 2 {
            return Err(SignalError::TooFewValues { needed: 2, found: vals.len() });
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(SignalError::DegenerateVariance);
        }
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, g: &GridSeries) -> GridSeries {
        let out: Vec<Option<f64>> = g
            .to_options()
            .into_iter()
            .map(|v| v.map(|x| (x - self.mean) / self.sd))
            .collect();
        g.with_options(&out)
    }
}

/// Subject-level z-normalization. With a `fit_mask`, statistics come only
/// from the masked (training) bins and are then applied to every bin.
pub fn zscore_subject(g: &GridSeries, fit_mask: Option<&[bool]>) -> Result<GridSeries, SignalError> {
    Ok(ZScoreStats::fit(g, fit_mask)?.apply(g))
}

/// Mask values outside `[Q1 - k*IQR, Q3 + k*IQR]`. Fewer than four observed
/// values leaves the series untouched.
pub fn iqr_mask(g: &GridSeries, k: f64) -> GridSeries {
    let mut sorted: Vec<f64> = g.observed().map(|(_, v)| v).collect();
    if sorted.len() < 4 {
        return g.clone();
    }
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - k * iqr, q3 + k * iqr);
    let out: Vec<Option<f64>> = g
        .to_options()
        .into_iter()
        .map(|v| v.filter(|&x| x >= lo && x <= hi))
        .collect();
    g.with_options(&out)
}

/// Running median over non-missing values.
///
/// `ZeroPhase` uses a centred window that shrinks at the edges; `Causal` uses
/// the trailing window `[i - width + 1, i]`. A bin whose window holds no
/// observation stays missing.
pub fn median_filter(g: &GridSeries, width: usize, mode: FilterMode) -> GridSeries {
    assert!(width % 2 == 1, "median width must be odd");
    let vals = g.to_options();
    let n = vals.len();
    let half = width / 2;
    let mut buf = Vec::with_capacity(width);
    let out: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let (lo, hi) = match mode {
                FilterMode::ZeroPhase => (i.saturating_sub(half), (i + half).min(n - 1)),
                FilterMode::Causal => (i.saturating_sub(width - 1), i),
            };
            buf.clear();
            buf.extend(vals[lo..=hi].iter().flatten());
            if buf.is_empty() {
                None
            } else {
                Some(median_of(&mut buf))
            }
        })
        .collect();
    g.with_options(&out)
}

/// One second-order section in transposed direct form II.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    /// Denominator `[1, a1, a2]`, leading one implied.
    pub a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Filter state that holds the output steady for a constant input `x0`.
    fn steady_state(&self, x0: f64) -> [f64; 2] {
        let y0 = self.dc_gain() * x0;
        let s1 = self.b[2] * x0 - self.a[1] * y0;
        let s0 = self.b[1] * x0 - self.a[0] * y0 + s1;
        [s0, s1]
    }

    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let [mut s0, mut s1] = self.steady_state(x0);
        for v in x.iter_mut() {
            let xi = *v;
            let y = self.b[0] * xi + s0;
            s0 = self.b[1] * xi - self.a[0] * y + s1;
            s1 = self.b[2] * xi - self.a[1] * y;
            *v = y;
        }
    }
}

/// Digital Butterworth low-pass from the analog prototype via the bilinear
/// transform with the cutoff prewarped, realized as cascaded biquads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ButterworthLowpass {
    pub order: usize,
    pub cutoff_hz: f64,
    pub fs_hz: f64,
    pub sections: Vec<Biquad>,
}

impl ButterworthLowpass {
    pub fn design(order: usize, cutoff_hz: f64, fs_hz: f64) -> Result<Self, SignalError> {
        if order == 0 {
            return Err(SignalError::InvalidParams("butter_order must be >= 1".into()));
        }
        if !(cutoff_hz > 0.0) || !(fs_hz > 0.0) {
            return Err(SignalError::InvalidParams("cutoff and fs must be positive".into()));
        }
        if cutoff_hz >= fs_hz / 2.0 {
            return Err(SignalError::CutoffAboveNyquist { cutoff_hz, fs_hz });
        }
        // Prewarped analog cutoff, normalized so s = (1 - z^-1) / (K (1 + z^-1)).
        let k = (std::f64::consts::PI * cutoff_hz / fs_hz).tan();
        let k2 = k * k;
        let mut sections = Vec::new();
        for i in 0..order / 2 {
            // Conjugate pole pair of the unit-cutoff prototype: s^2 + q s + 1.
            let theta = std::f64::consts::PI * (2 * i + 1) as f64 / (2 * order) as f64;
            let q = 2.0 * theta.sin();
            let norm = 1.0 / (1.0 + q * k + k2);
            let b0 = k2 * norm;
            sections.push(Biquad {
                b: [b0, 2.0 * b0, b0],
                a: [2.0 * (k2 - 1.0) * norm, (1.0 - q * k + k2) * norm],
            });
        }
        if order % 2 == 1 {
            // Real pole: s + 1.
            let norm = 1.0 / (1.0 + k);
            sections.push(Biquad { b: [k * norm, k * norm, 0.0], a: [(k - 1.0) * norm, 0.0] });
        }
        Ok(Self { order, cutoff_hz, fs_hz, sections })
    }

    /// Single causal pass. State is initialized to the steady state of the
    /// first sample, so a constant input passes through unchanged.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            s.run(&mut y);
        }
        y
    }

    /// Forward pass followed by a reversed pass: zero phase, squared magnitude.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.filter(x);
        y.reverse();
        let mut y = self.filter(&y);
        y.reverse();
        y
    }

    pub fn apply(&self, x: &[f64], mode: FilterMode) -> Vec<f64> {
        match mode {
            FilterMode::Causal => self.filter(x),
            FilterMode::ZeroPhase => self.filtfilt(x),
        }
    }
}

/// Low-pass a raw-rate series sampled at `fs_hz`. Timestamps are kept; the
/// samples are treated as uniformly spaced at `fs_hz`.
pub fn butterworth_lowpass(
    s: &SampleSeries,
    p: &FilterParams,
    fs_hz: f64,
) -> Result<SampleSeries, SignalError> {
    let filt = ButterworthLowpass::design(p.butter_order, p.butter_cutoff_hz, fs_hz)?;
    let x: Vec<f64> = s.values().collect();
    let y = filt.apply(&x, p.mode);
    Ok(SampleSeries::new(
        s.subject_id.clone(),
        s.channel,
        s.samples.iter().zip(y).map(|(&(t, _), v)| (t, v)).collect(),
    ))
}
