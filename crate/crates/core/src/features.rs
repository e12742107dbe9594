//! Handcrafted per-window descriptors for the classical learners.
//!
//! Registry, in order:
//! - GSR (12): mean, sd, min, max, range, slope, diff mean, diff sd,
//!   tonic mean, phasic mean, phasic max, SCR count
//! - GSR band energies (2): low (DFT bins 1-2), high (bins 3-6)
//! - HR (9): mean, sd, min, max, range, slope, diff mean, diff sd,
//!   fraction of bins above the window mean
//! - HR band energies (2)
//! - cross (1): zero-lag Pearson correlation of GSR and HR
//!
//! GSR-only uses the GSR blocks (14), HR-only the HR blocks (11), fused all
//! five (26). Standard deviations are sample (n - 1) deviations.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Modality, Window, WindowChannel};
use crate::eda::count_peaks;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("window {start_bin} of subject {subject} lacks channel {channel:?}")]
    MissingChannel { subject: String, start_bin: usize, channel: WindowChannel },
    #[error("window {start_bin} of subject {subject} has a non-finite value")]
    NonFinite { subject: String, start_bin: usize },
    #[error("no windows to featurize")]
    Empty,
    #[error("io: {0}")]
    Io(String),
}

const GSR_NAMES: [&str; 12] = [
    "gsr_mean",
    "gsr_sd",
    "gsr_min",
    "gsr_max",
    "gsr_range",
    "gsr_slope",
    "gsr_diff_mean",
    "gsr_diff_sd",
    "gsr_tonic_mean",
    "gsr_phasic_mean",
    "gsr_phasic_max",
    "gsr_scr_count",
];
const GSR_FREQ_NAMES: [&str; 2] = ["gsr_band_low", "gsr_band_high"];
const HR_NAMES: [&str; 9] = [
    "hr_mean",
    "hr_sd",
    "hr_min",
    "hr_max",
    "hr_range",
    "hr_slope",
    "hr_diff_mean",
    "hr_diff_sd",
    "hr_frac_above_mean",
];
const HR_FREQ_NAMES: [&str; 2] = ["hr_band_low", "hr_band_high"];
const CROSS_NAMES: [&str; 1] = ["gsr_hr_corr"];

/// SCR peak detection settings applied to the phasic window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureParams {
    pub scr_threshold: f64,
    pub scr_min_sep_bins: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self { scr_threshold: 0.05, scr_min_sep_bins: 1 }
    }
}

pub fn feature_names(m: Modality) -> Vec<&'static str> {
    let mut v = Vec::new();
    if matches!(m, Modality::GsrOnly | Modality::FusedEarly) {
        v.extend(GSR_NAMES);
        v.extend(GSR_FREQ_NAMES);
    }
    if matches!(m, Modality::HrOnly | Modality::FusedEarly) {
        v.extend(HR_NAMES);
        v.extend(HR_FREQ_NAMES);
    }
    if m == Modality::FusedEarly {
        v.extend(CROSS_NAMES);
    }
    v
}

fn owned_names(m: Modality) -> Vec<String> {
    feature_names(m).into_iter().map(String::from).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    /// Set when a channel was constant so the correlation was defined as 0.
    pub degenerate_correlation: bool,
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Least-squares slope of `x` against `0..n`, per bin.
pub fn ls_slope(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let tm = (n - 1) as f64 / 2.0;
    let xm = mean(x);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, &v) in x.iter().enumerate() {
        let dt = t as f64 - tm;
        sxy += dt * (v - xm);
        sxx += dt * dt;
    }
    sxy / sxx
}

/// `|X_k|^2` of the DFT by direct summation, `k = 0..=n/2`.
pub fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * PI * (k * t % n) as f64 / n as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// Low (bins 1-2) and high (bins 3-6) band energies; DC excluded.
/// The window mean is removed first, which leaves bins `k >= 1` unchanged
/// and makes constant windows exactly zero.
pub fn band_energies(x: &[f64]) -> [f64; 2] {
    let m = mean(x);
    let centered: Vec<f64> = x.iter().map(|v| v - m).collect();
    let p = power_spectrum(&centered);
    let band = |lo: usize, hi: usize| (lo..=hi.min(p.len().saturating_sub(1))).map(|k| p[k]).sum::<f64>();
    [band(1, 2), band(3, 6)]
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn basic_stats(x: &[f64], out: &mut Vec<f64>) {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let diffs: Vec<f64> = x.windows(2).map(|p| p[1] - p[0]).collect();
    let (dm, dsd) = if diffs.is_empty() { (0.0, 0.0) } else { (mean(&diffs), sample_sd(&diffs)) };
    out.extend([mean(x), sample_sd(x), lo, hi, hi - lo, ls_slope(x), dm, dsd]);
}

fn channel(w: &Window, c: WindowChannel) -> Result<&[f64], FeatureError> {
    let v = w.channel(c).ok_or_else(|| FeatureError::MissingChannel {
        subject: w.subject_id.clone(),
        start_bin: w.start_bin,
        channel: c,
    })?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(FeatureError::NonFinite { subject: w.subject_id.clone(), start_bin: w.start_bin });
    }
    Ok(v)
}

pub fn extract(w: &Window, m: Modality) -> Result<FeatureVector, FeatureError> {
    extract_with(w, m, &FeatureParams::default())
}

pub fn extract_with(w: &Window, m: Modality, p: &FeatureParams) -> Result<FeatureVector, FeatureError> {
    let mut values = Vec::with_capacity(26);
    let mut degenerate_correlation = false;
    let use_gsr = matches!(m, Modality::GsrOnly | Modality::FusedEarly);
    let use_hr = matches!(m, Modality::HrOnly | Modality::FusedEarly);
    if use_gsr {
        let g = channel(w, WindowChannel::Gsr)?;
        let tonic = channel(w, WindowChannel::Tonic)?;
        let phasic = channel(w, WindowChannel::Phasic)?;
        basic_stats(g, &mut values);
        let opts: Vec<Option<f64>> = phasic.iter().map(|&v| Some(v)).collect();
        values.extend([
            mean(tonic),
            mean(phasic),
            phasic.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count_peaks(&opts, p.scr_threshold, p.scr_min_sep_bins) as f64,
        ]);
        values.extend(band_energies(g));
    }
    if use_hr {
        let h = channel(w, WindowChannel::Hr)?;
        basic_stats(h, &mut values);
        let m = mean(h);
        values.push(h.iter().filter(|&&v| v > m).count() as f64 / h.len() as f64);
        values.extend(band_energies(h));
    }
    if m == Modality::FusedEarly {
        let r = pearson(channel(w, WindowChannel::Gsr)?, channel(w, WindowChannel::Hr)?);
        degenerate_correlation = r.is_none();
        values.push(r.unwrap_or(0.0));
    }
    Ok(FeatureVector { names: owned_names(m), values, degenerate_correlation })
}

/// Row-major `n x d` feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub degenerate_rows: usize,
}

impl FeatureMatrix {
    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), FeatureError> {
        let io = |e: std::io::Error| FeatureError::Io(e.to_string());
        let mut w = std::io::BufWriter::new(w);
        writeln!(w, "{}", self.names.join(",")).map_err(io)?;
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

pub fn feature_matrix(windows: &[Window], m: Modality) -> Result<FeatureMatrix, FeatureError> {
    feature_matrix_with(windows, m, &FeatureParams::default())
}

pub fn feature_matrix_with(
    windows: &[Window],
    m: Modality,
    p: &FeatureParams,
) -> Result<FeatureMatrix, FeatureError> {
    if windows.is_empty() {
        return Err(FeatureError::Empty);
    }
    let mut rows = Vec::with_capacity(windows.len());
    let mut degenerate_rows = 0;
    for w in windows {
        let f = extract_with(w, m, p)?;
        degenerate_rows += f.degenerate_correlation as usize;
        rows.push(f.values);
    }
    Ok(FeatureMatrix { names: owned_names(m), rows, degenerate_rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Label;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn window(gsr: Vec<f64>, hr: Vec<f64>) -> Window {
        let n = gsr.len();
        let phasic: Vec<f64> = (0..n).map(|i| if i == 5 { 0.4 } else { 0.0 }).collect();
        Window {
            subject_id: "s".into(),
            start_bin: 0,
            length: n,
            channels: BTreeMap::from([
                (WindowChannel::Gsr, gsr.clone()),
                (WindowChannel::Hr, hr),
                (WindowChannel::Tonic, gsr),
                (WindowChannel::Phasic, phasic),
            ]),
            glucose_last: 100.0,
            label: Label::Normal,
        }
    }

    fn idx(m: Modality, name: &str) -> usize {
        feature_names(m).iter().position(|n| *n == name).unwrap()
    }

    #[test]
    fn registry_sizes() {
        assert_eq!(feature_names(Modality::GsrOnly).len(), 12 + 2);
        assert_eq!(feature_names(Modality::HrOnly).len(), 9 + 2);
        assert_eq!(feature_names(Modality::FusedEarly).len(), 12 + 2 + 9 + 2 + 1);
        let names = feature_names(Modality::FusedEarly);
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn constant_window() {
        let f = extract(&window(vec![3.0; 12], vec![3.0; 12]), Modality::FusedEarly).unwrap();
        let m = Modality::FusedEarly;
        for name in ["gsr_sd", "gsr_slope", "gsr_diff_mean", "gsr_diff_sd", "gsr_band_low", "gsr_band_high", "hr_band_low"] {
            assert_eq!(f.values[idx(m, name)], 0.0, "{name}");
        }
        assert!(f.degenerate_correlation);
        assert_eq!(f.values[idx(m, "gsr_hr_corr")], 0.0);
    }

    #[test]
    fn ramp_slope_is_one() {
        let ramp: Vec<f64> = (0..12).map(f64::from).collect();
        let f = extract(&window(ramp.clone(), ramp), Modality::FusedEarly).unwrap();
        assert_eq!(f.values[idx(Modality::FusedEarly, "gsr_slope")], 1.0);
        assert_eq!(f.values[idx(Modality::FusedEarly, "hr_slope")], 1.0);
        assert!((f.values[idx(Modality::FusedEarly, "gsr_hr_corr")] - 1.0).abs() < 1e-12);
    }

    /// Naive complex DFT written independently of `power_spectrum`.
    fn dft_oracle(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        (0..x.len())
            .map(|k| {
                let mut acc = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let th = 2.0 * PI * k as f64 * t as f64 / n;
                    acc.0 += v * th.cos();
                    acc.1 -= v * th.sin();
                }
                acc.0 * acc.0 + acc.1 * acc.1
            })
            .collect()
    }

    #[test]
    fn alternating_sequence_energy_in_top_bin() {
        let alt: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let oracle = dft_oracle(&alt);
        assert!((oracle[6] - 144.0).abs() < 1e-9);
        let [low, high] = band_energies(&alt);
        assert!(low.abs() < 1e-9);
        assert!((high - oracle[3..=6].iter().sum::<f64>()).abs() < 1e-9);
        let p = power_spectrum(&alt);
        assert!(p[..6].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn scr_count_from_phasic() {
        let f = extract(&window(vec![1.0; 12], vec![2.0; 12]), Modality::GsrOnly).unwrap();
        assert_eq!(f.values[idx(Modality::GsrOnly, "gsr_scr_count")], 1.0);
        assert_eq!(f.values[idx(Modality::GsrOnly, "gsr_phasic_max")], 0.4);
    }

    #[test]
    fn missing_channel_is_an_error() {
        let mut w = window(vec![1.0; 12], vec![2.0; 12]);
        w.channels.remove(&WindowChannel::Hr);
        assert!(extract(&w, Modality::GsrOnly).is_ok());
        assert!(matches!(extract(&w, Modality::HrOnly), Err(FeatureError::MissingChannel { .. })));
    }

    #[test]
    fn matrix_rows_and_csv_header() {
        let w = window((0..12).map(|i| (i as f64).sin()).collect(), vec![2.0; 12]);
        let fm = feature_matrix(&[w.clone(), w.clone(), w], Modality::FusedEarly).unwrap();
        assert_eq!(fm.rows.len(), 3);
        assert!(fm.rows.iter().all(|r| r == &fm.rows[0]));
        let mut buf = Vec::new();
        fm.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("gsr_mean,gsr_sd,"));
        assert_eq!(feature_matrix(&[], Modality::GsrOnly), Err(FeatureError::Empty));
    }

    const SHIFT_INVARIANT: [&str; 7] = ["sd", "range", "slope", "diff_mean", "diff_sd", "band_low", "band_high"];

    proptest! {
        #[test]
        fn translation_and_scale(
            g in proptest::collection::vec(-5.0f64..5.0, 12),
            h in proptest::collection::vec(-5.0f64..5.0, 12),
            shift in -10.0f64..10.0,
            c in 0.1f64..10.0,
        ) {
            let m = Modality::FusedEarly;
            let base = extract(&window(g.clone(), h.clone()), m).unwrap();
            let shifted = extract(&window(g.clone(), h.iter().map(|v| v + shift).collect()), m).unwrap();
            let scaled = extract(&window(g, h.iter().map(|v| v * c).collect()), m).unwrap();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-8 * (1.0 + a.abs().max(b.abs()));
            for name in SHIFT_INVARIANT {
                let key = format!("hr_{name}");
                let i = idx(m, &key);
                prop_assert!(close(base.values[i], shifted.values[i]), "{key}");
            }
            let i = idx(m, "hr_mean");
            prop_assert!(close(base.values[i] + shift, shifted.values[i]));
            for name in ["hr_sd", "hr_range", "hr_slope", "hr_diff_mean", "hr_diff_sd"] {
                let i = idx(m, name);
                prop_assert!(close(base.values[i] * c, scaled.values[i]), "{name}");
            }
            for name in ["hr_band_low", "hr_band_high"] {
                let i = idx(m, name);
                prop_assert!(close(base.values[i] * c * c, scaled.values[i]), "{name}");
            }
            let i = idx(m, "gsr_hr_corr");
            prop_assert!(close(base.values[i], scaled.values[i]));
            prop_assert!(close(base.values[i], shifted.values[i]));
        }
    }
}
