//! Per-subject conditioning: raw bundles onto the shared 5-minute grid.
//!
//! The order is fixed. GSR: low-pass at raw rate, aggregate, IQR mask,
//! forward fill, z-score, then tonic/phasic decomposition of the normalized
//! series. HR: aggregate, median filter, forward fill, z-score. CGM is only
//! aggregated with the mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::WindowChannel;
use crate::eda::{self, EdaError, EdaParams};
use crate::grid::{Channel, GridSeries, SampleSeries, TimeInstant, GRID_STEP_S};
use crate::ingest::SubjectBundle;
use crate::signal::{self, AggregationStat, FilterParams, SignalError};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("subject {subject}, {channel}: {source}")]
    Signal { subject: String, channel: Channel, source: SignalError },
    #[error("subject {subject}: {source}")]
    Eda { subject: String, source: EdaError },
    #[error("subject {0}: no CGM samples")]
    NoCgm(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub filter: FilterParams,
    pub aggregation: AggregationStat,
    pub eda: EdaParams,
}

/// Diagnostics from the decomposition step, summed over segments.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdaSummary {
    pub segments: usize,
    pub unconverged_segments: usize,
    pub iterations: usize,
    pub scr_count_total: usize,
    pub residual_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedSubject {
    pub subject_id: String,
    pub channels: BTreeMap<WindowChannel, GridSeries>,
    pub cgm: GridSeries,
    pub eda: Option<EdaSummary>,
    /// Steps applied, in order, for provenance.
    pub steps: Vec<String>,
}

/// Grid anchored at the first CGM sample and spanning through the last.
pub fn grid_for(cgm: &SampleSeries) -> Option<(TimeInstant, usize)> {
    let first = cgm.samples.first()?.0;
    let last = cgm.samples.last()?.0;
    let n = ((last.seconds() - first.seconds()) / GRID_STEP_S) as usize + 1;
    Some((first, n))
}

pub fn preprocess_subject(
    bundle: &SubjectBundle,
    cfg: &PreprocessConfig,
) -> Result<PreprocessedSubject, PreprocessError> {
    let sid = bundle.subject_id.clone();
    let sig_err = |channel: Channel| {
        let subject = sid.clone();
        move |source| PreprocessError::Signal { subject: subject.clone(), channel, source }
    };
    cfg.filter.validate().map_err(sig_err(Channel::Gsr))?;
    let cgm_raw = bundle.get(Channel::Cgm).ok_or_else(|| PreprocessError::NoCgm(sid.clone()))?;
    let (start, n_bins) = grid_for(cgm_raw).ok_or_else(|| PreprocessError::NoCgm(sid.clone()))?;
    let mut steps = Vec::new();

    let cgm = signal::aggregate_to_grid(cgm_raw, start, n_bins, AggregationStat::Mean);
    steps.push("cgm: aggregate(mean)".to_string());

    let mut channels = BTreeMap::new();
    let mut eda_summary = None;

    if let Some(raw) = bundle.get(Channel::Gsr) {
        let fp = &cfg.filter;
        let fs = raw.median_interval_s().map(|dt| 1.0 / dt);
        let filtered = match fs {
            Some(fs) if fp.butter_cutoff_hz < fs / 2.0 => {
                steps.push(format!("gsr: lowpass(order {}, {} Hz, fs {fs:.4} Hz)", fp.butter_order, fp.butter_cutoff_hz));
                signal::butterworth_lowpass(raw, fp, fs).map_err(sig_err(Channel::Gsr))?
            }
            _ => {
                log::info!(
                    "{sid}: GSR effective fs {:?} Hz leaves {} Hz cutoff at or above Nyquist; low-pass skipped",
                    fs,
                    fp.butter_cutoff_hz
                );
                steps.push("gsr: lowpass skipped (cutoff >= fs/2)".to_string());
                raw.clone()
            }
        };
        let g = signal::aggregate_to_grid(&filtered, start, n_bins, cfg.aggregation);
        let g = signal::iqr_mask(&g, fp.iqr_k);
        let g = signal::forward_fill(&g, fp.max_ffill_gap_bins);
        let g = signal::zscore_subject(&g, None).map_err(sig_err(Channel::Gsr))?;
        steps.push(format!(
            "gsr: aggregate({:?}) -> iqr_mask(k {}) -> forward_fill({}) -> zscore",
            cfg.aggregation, fp.iqr_k, fp.max_ffill_gap_bins
        ));
        let (tonic, phasic, summary) = decompose_segments(&g, &cfg.eda)
            .map_err(|source| PreprocessError::Eda { subject: sid.clone(), source })?;
        steps.push("gsr: eda decomposition".to_string());
        channels.insert(WindowChannel::Gsr, g);
        channels.insert(WindowChannel::Tonic, tonic);
        channels.insert(WindowChannel::Phasic, phasic);
        eda_summary = Some(summary);
    }

    if let Some(raw) = bundle.get(Channel::Hr) {
        let fp = &cfg.filter;
        let g = signal::aggregate_to_grid(raw, start, n_bins, cfg.aggregation);
        let g = signal::median_filter(&g, fp.median_width, fp.mode);
        let g = signal::forward_fill(&g, fp.max_ffill_gap_bins);
        let g = signal::zscore_subject(&g, None).map_err(sig_err(Channel::Hr))?;
        steps.push(format!(
            "hr: aggregate({:?}) -> median_filter({}, {:?}) -> forward_fill({}) -> zscore",
            cfg.aggregation, fp.median_width, fp.mode, fp.max_ffill_gap_bins
        ));
        channels.insert(WindowChannel::Hr, g);
    }

    Ok(PreprocessedSubject { subject_id: sid, channels, cgm, eda: eda_summary, steps })
}

/// Decompose each maximal observed run of at least 8 bins independently.
/// Shorter runs and gaps leave tonic/phasic missing. A run that hits the
/// iteration cap keeps its best iterate and is counted as unconverged.
pub fn decompose_segments(
    g: &GridSeries,
    p: &EdaParams,
) -> Result<(GridSeries, GridSeries, EdaSummary), EdaError> {
    p.validate()?;
    let vals = g.to_options();
    let n = vals.len();
    let mut tonic = vec![None; n];
    let mut phasic = vec![None; n];
    let mut summary = EdaSummary::default();
    let mut i = 0;
    while i < n {
        if vals[i].is_none() {
            i += 1;
            continue;
        }
        let s = i;
        while i < n && vals[i].is_some() {
            i += 1;
        }
        if i - s < 8 {
            continue;
        }
        let seg: Vec<f64> = vals[s..i].iter().map(|v| v.unwrap()).collect();
        let seg_g = GridSeries::from_values(g.subject_id.clone(), g.channel, g.time_of(s), seg)
            .expect("non-empty segment");
        let d = match eda::decompose(&seg_g, p) {
            Ok(d) => d,
            Err(EdaError::NonConvergence(d)) => {
                log::warn!("{}: EDA segment at bin {s} did not converge", g.subject_id);
                summary.unconverged_segments += 1;
                *d
            }
            Err(e) => return Err(e),
        };
        for (k, (t, ph)) in d.tonic.to_options().into_iter().zip(d.phasic.to_options()).enumerate() {
            tonic[s + k] = t;
            phasic[s + k] = ph;
        }
        summary.segments += 1;
        summary.iterations += d.iterations;
        summary.scr_count_total += d.scr_count_total;
        summary.residual_norm = summary.residual_norm.hypot(d.residual_norm);
    }
    Ok((g.with_options(&tonic), g.with_options(&phasic), summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::BundleSource;

    fn series(ch: Channel, step: i64, vals: &[f64]) -> SampleSeries {
        let t0 = 1_600_000_000;
        SampleSeries::new(
            "s",
            ch,
            vals.iter().enumerate().map(|(i, &v)| (TimeInstant::new(t0 + i as i64 * step).unwrap(), v)).collect(),
        )
    }

    fn bundle(gsr: bool, hr: bool) -> SubjectBundle {
        let nb = 40;
        let cgm: Vec<f64> = (0..nb).map(|i| 100.0 + (i as f64 * 0.3).sin() * 40.0).collect();
        let raw_n = nb * 300;
        let mut m = BTreeMap::from([(Channel::Cgm, series(Channel::Cgm, 300, &cgm))]);
        if gsr {
            let v: Vec<f64> = (0..raw_n).map(|i| 5.0 + (i as f64 / 900.0).sin()).collect();
            m.insert(Channel::Gsr, series(Channel::Gsr, 1, &v));
        }
        if hr {
            let v: Vec<f64> = (0..raw_n).map(|i| 70.0 + 5.0 * (i as f64 / 1300.0).cos()).collect();
            m.insert(Channel::Hr, series(Channel::Hr, 1, &v));
        }
        SubjectBundle::new("s", m, BundleSource::Synthetic).unwrap()
    }

    #[test]
    fn channels_follow_bundle_contents() {
        let cfg = PreprocessConfig::default();
        let p = preprocess_subject(&bundle(true, true), &cfg).unwrap();
        assert_eq!(
            p.channels.keys().copied().collect::<Vec<_>>(),
            vec![WindowChannel::Gsr, WindowChannel::Hr, WindowChannel::Tonic, WindowChannel::Phasic]
        );
        assert_eq!(p.cgm.len(), 40);
        assert!(p.channels.values().all(|g| g.len() == 40 && g.start == p.cgm.start));
        let hr_only = preprocess_subject(&bundle(false, true), &cfg).unwrap();
        assert_eq!(hr_only.channels.keys().copied().collect::<Vec<_>>(), vec![WindowChannel::Hr]);
        assert!(hr_only.eda.is_none());
    }

    #[test]
    fn cgm_is_never_filtered() {
        let b = bundle(true, true);
        let p = preprocess_subject(&b, &PreprocessConfig::default()).unwrap();
        let raw = b.get(Channel::Cgm).unwrap();
        for (i, (_, v)) in raw.samples.iter().enumerate() {
            assert_eq!(p.cgm.get(i), Some(*v));
        }
    }

    #[test]
    fn normalized_channels_have_unit_scale() {
        let p = preprocess_subject(&bundle(true, true), &PreprocessConfig::default()).unwrap();
        for ch in [WindowChannel::Gsr, WindowChannel::Hr] {
            let v: Vec<f64> = p.channels[&ch].observed().map(|(_, v)| v).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
            assert!(m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9, "{ch:?}: {m} {sd}");
        }
    }

    #[test]
    fn lowpass_skipped_at_one_hz() {
        let p = preprocess_subject(&bundle(true, false), &PreprocessConfig::default()).unwrap();
        assert!(p.steps.iter().any(|s| s.contains("lowpass skipped")));
    }

    #[test]
    fn segments_respect_gaps() {
        let mut vals: Vec<Option<f64>> = (0..30).map(|i| Some((i as f64 * 0.7).sin())).collect();
        for v in &mut vals[10..13] {
            *v = None;
        }
        let g = GridSeries::from_options("s", Channel::Gsr, TimeInstant::new(0).unwrap(), &vals).unwrap();
        let (t, ph, s) = decompose_segments(&g, &EdaParams::default()).unwrap();
        assert_eq!(s.segments, 2);
        for i in 10..13 {
            assert!(t.is_missing(i) && ph.is_missing(i));
        }
        assert!(!t.is_missing(0) && !t.is_missing(29));
    }
}
