//! Seeded synthetic cohort with coupled CGM, GSR and HR streams and exact
//! ground-truth hypoglycemia events.
//!
//! Each subject seed is split into independent streams for events and
//! glucose, GSR, and HR. Coupling only rescales quantities already drawn
//! (SCR candidates are thinned, HR gets an additive offset), so with neutral
//! coupling the physiological streams do not depend on the event stream.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Channel, SampleSeries, TimeInstant, GRID_STEP_S};
use crate::ingest::{BundleSource, SubjectBundle};
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("pooled prevalence {prevalence:.4} outside [{lo}, {hi}] after rate adjustment")]
    PrevalenceOutOfBand { prevalence: f64, lo: f64, hi: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlucoseCfg {
    pub mean_mg_dl: f64,
    pub reversion_per_min: f64,
    /// mg/dL per sqrt(minute).
    pub noise: f64,
    /// Lower clamp of the base process, keeping it clear of the threshold.
    pub floor_mg_dl: f64,
}

impl Default for GlucoseCfg {
    fn default() -> Self {
        Self { mean_mg_dl: 120.0, reversion_per_min: 0.02, noise: 1.5, floor_mg_dl: 80.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventCfg {
    pub rate_per_day: f64,
    pub nadir_mg_dl: (f64, f64),
    pub descent_min: (f64, f64),
    pub hold_min: (f64, f64),
    pub recovery_min: (f64, f64),
}

impl Default for EventCfg {
    fn default() -> Self {
        Self {
            rate_per_day: 0.8,
            nadir_mg_dl: (50.0, 65.0),
            descent_min: (30.0, 60.0),
            hold_min: (15.0, 45.0),
            recovery_min: (30.0, 90.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CouplingCfg {
    /// Multiplier on the SCR rate over `[onset - lead, end]`.
    pub scr_rate_factor: f64,
    pub hr_offset_bpm: f64,
    pub lead_min: (f64, f64),
}

impl Default for CouplingCfg {
    fn default() -> Self {
        Self { scr_rate_factor: 3.0, hr_offset_bpm: 8.0, lead_min: (20.0, 40.0) }
    }
}

impl CouplingCfg {
    pub fn neutral() -> Self {
        Self { scr_rate_factor: 1.0, hr_offset_bpm: 0.0, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GsrCfg {
    pub fs_hz: f64,
    pub tonic_mean_us: f64,
    /// Random-walk increment per 5-minute step; linear between steps.
    pub tonic_sigma_us: f64,
    pub tonic_reversion_per_step: f64,
    pub scr_rate_per_min: f64,
    pub scr_amp_mean_us: f64,
    pub tau1_s: f64,
    pub tau2_s: f64,
    pub noise_us: f64,
}

impl Default for GsrCfg {
    fn default() -> Self {
        Self {
            fs_hz: 1.0,
            tonic_mean_us: 5.0,
            tonic_sigma_us: 0.02,
            tonic_reversion_per_step: 0.01,
            scr_rate_per_min: 0.5,
            scr_amp_mean_us: 0.3,
            tau1_s: 10.0,
            tau2_s: 1.0,
            noise_us: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HrCfg {
    pub fs_hz: f64,
    pub mean_bpm: f64,
    pub circadian_amp_bpm: f64,
    pub activity_rate_per_day: f64,
    pub activity_bpm: (f64, f64),
    pub activity_min: (f64, f64),
    pub noise_bpm: f64,
}

impl Default for HrCfg {
    fn default() -> Self {
        Self {
            fs_hz: 1.0,
            mean_bpm: 65.0,
            circadian_amp_bpm: 7.0,
            activity_rate_per_day: 3.0,
            activity_bpm: (15.0, 35.0),
            activity_min: (10.0, 40.0),
            noise_bpm: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub days: f64,
    pub cgm_step_s: i64,
    pub start_epoch_s: i64,
    pub glucose: GlucoseCfg,
    pub events: EventCfg,
    pub coupling: CouplingCfg,
    pub gsr: GsrCfg,
    pub hr: HrCfg,
    pub prevalence_band: (f64, f64),
    /// Window length used to count labelled windows for the prevalence check.
    pub window_length: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            days: 7.0,
            cgm_step_s: GRID_STEP_S,
            start_epoch_s: 1_704_067_200,
            glucose: GlucoseCfg::default(),
            events: EventCfg::default(),
            coupling: CouplingCfg::default(),
            gsr: GsrCfg::default(),
            hr: HrCfg::default(),
            prevalence_band: (0.02, 0.06),
            window_length: 12,
        }
    }
}

fn ordered(name: &str, r: (f64, f64)) -> Result<(), SynthError> {
    if !(r.0 <= r.1 && r.0 >= 0.0) {
        return Err(SynthError::InvalidConfig(format!("{name} range {r:?}")));
    }
    Ok(())
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if !(self.days > 0.0) || self.cgm_step_s <= 0 {
            return bad("days and cgm_step_s must be positive");
        }
        let rates = [
            ("glucose.reversion_per_min", self.glucose.reversion_per_min),
            ("glucose.noise", self.glucose.noise),
            ("events.rate_per_day", self.events.rate_per_day),
            ("coupling.scr_rate_factor", self.coupling.scr_rate_factor),
            ("gsr.tonic_sigma_us", self.gsr.tonic_sigma_us),
            ("gsr.tonic_reversion_per_step", self.gsr.tonic_reversion_per_step),
            ("gsr.scr_rate_per_min", self.gsr.scr_rate_per_min),
            ("gsr.scr_amp_mean_us", self.gsr.scr_amp_mean_us),
            ("gsr.noise_us", self.gsr.noise_us),
            ("hr.activity_rate_per_day", self.hr.activity_rate_per_day),
            ("hr.noise_bpm", self.hr.noise_bpm),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, r)| !(*r >= 0.0)) {
            return Err(SynthError::InvalidConfig(format!("{name} must be nonnegative, got {v}")));
        }
        if !(self.gsr.fs_hz > 0.0 && self.hr.fs_hz > 0.0) {
            return bad("sampling rates must be positive");
        }
        if !(self.gsr.tau1_s > self.gsr.tau2_s && self.gsr.tau2_s > 0.0) {
            return bad("require tau1_s > tau2_s > 0");
        }
        ordered("nadir_mg_dl", self.events.nadir_mg_dl)?;
        ordered("descent_min", self.events.descent_min)?;
        ordered("hold_min", self.events.hold_min)?;
        ordered("recovery_min", self.events.recovery_min)?;
        ordered("lead_min", self.coupling.lead_min)?;
        ordered("activity_bpm", self.hr.activity_bpm)?;
        ordered("activity_min", self.hr.activity_min)?;
        ordered("prevalence_band", self.prevalence_band)?;
        if self.events.descent_min.0 <= 0.0 || self.events.recovery_min.0 <= 0.0 {
            return bad("descent and recovery must be positive");
        }
        if self.events.nadir_mg_dl.1 >= self.glucose.floor_mg_dl {
            return bad("nadir must lie below the glucose floor");
        }
        Ok(())
    }

    fn horizon_s(&self) -> i64 {
        (self.days * 86_400.0).round() as i64
    }

    pub fn cgm_samples(&self) -> usize {
        (self.horizon_s() / self.cgm_step_s) as usize
    }
}

/// One hypoglycemic excursion; times are seconds since the series start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub onset_s: i64,
    /// End of the descent; glucose holds at the nadir until `hold_end_s`.
    pub nadir_s: i64,
    pub hold_end_s: i64,
    pub end_s: i64,
    pub nadir_mg_dl: f64,
    pub lead_s: i64,
}

impl SimEvent {
    pub fn coupling_start_s(&self) -> i64 {
        self.onset_s - self.lead_s
    }

    /// Fraction of the way from base glucose to the nadir at time `t`.
    pub fn envelope(&self, t: f64) -> f64 {
        let (on, na, he, en) = (self.onset_s as f64, self.nadir_s as f64, self.hold_end_s as f64, self.end_s as f64);
        if t <= on || t >= en {
            0.0
        } else if t < na {
            0.5 * (1.0 - (PI * (t - on) / (na - on)).cos())
        } else if t <= he {
            1.0
        } else {
            0.5 * (1.0 + (PI * (t - he) / (en - he)).cos())
        }
    }

    pub fn coupled(&self, t: f64) -> bool {
        t >= self.coupling_start_s() as f64 && t <= self.end_s as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub subject_id: String,
    pub start: TimeInstant,
    pub events: Vec<SimEvent>,
}

impl SimTruth {
    pub fn coupled_at(&self, t: TimeInstant) -> bool {
        let s = (t.seconds() - self.start.seconds()) as f64;
        self.events.iter().any(|e| e.coupled(s))
    }

    pub fn in_event(&self, t: TimeInstant) -> bool {
        let s = t.seconds() - self.start.seconds();
        self.events.iter().any(|e| e.onset_s < s && s < e.end_s)
    }
}

/// Rows `subject,onset,nadir_time,end,lead_s` with ISO-8601 times.
pub fn write_truth_csv<W: Write>(truths: &[SimTruth], mut w: W) -> Result<(), SynthError> {
    writeln!(w, "subject,onset,nadir_time,end,lead_s")?;
    for t in truths {
        for e in &t.events {
            let at = |s: i64| t.start.offset(s).to_iso8601();
            writeln!(w, "{},{},{},{},{}", t.subject_id, at(e.onset_s), at(e.nadir_s), at(e.end_s), e.lead_s)?;
        }
    }
    Ok(())
}

fn uniform(rng: &mut Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.gen_range(r.0..r.1)
    } else {
        r.0
    }
}

fn exponential(rng: &mut Rng, mean: f64) -> f64 {
    -mean * (1.0 - rng.gen::<f64>()).ln()
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Renewal process: the next onset follows the previous event's end by an
/// exponential gap plus the next event's lead, so coupling windows never
/// overlap.
fn draw_events(cfg: &SimConfig, rng: &mut Rng) -> Vec<SimEvent> {
    let horizon = cfg.horizon_s();
    let ev = &cfg.events;
    let mut out = Vec::new();
    if ev.rate_per_day <= 0.0 {
        return out;
    }
    let mean_gap_s = 86_400.0 / ev.rate_per_day;
    let mut free_from = 0i64;
    loop {
        let lead_s = (uniform(rng, cfg.coupling.lead_min) * 60.0).round() as i64;
        let descent = (uniform(rng, ev.descent_min) * 60.0).round() as i64;
        let hold = (uniform(rng, ev.hold_min) * 60.0).round() as i64;
        let recovery = (uniform(rng, ev.recovery_min) * 60.0).round() as i64;
        let nadir_mg_dl = uniform(rng, ev.nadir_mg_dl);
        let onset_s = free_from + lead_s + exponential(rng, mean_gap_s).round() as i64;
        let end_s = onset_s + descent + hold + recovery;
        if end_s >= horizon {
            break;
        }
        out.push(SimEvent { onset_s, nadir_s: onset_s + descent, hold_end_s: onset_s + descent + hold, end_s, nadir_mg_dl, lead_s });
        free_from = end_s;
    }
    out
}

fn glucose_series(cfg: &SimConfig, events: &[SimEvent], rng: &mut Rng) -> Vec<f64> {
    let g = &cfg.glucose;
    let n = cfg.cgm_samples();
    let dt_min = cfg.cgm_step_s as f64 / 60.0;
    let decay = (-g.reversion_per_min * dt_min).exp();
    let sd_step = if g.reversion_per_min > 0.0 {
        g.noise * ((1.0 - decay * decay) / (2.0 * g.reversion_per_min)).sqrt()
    } else {
        g.noise * dt_min.sqrt()
    };
    let sd_stationary = if g.reversion_per_min > 0.0 { g.noise / (2.0 * g.reversion_per_min).sqrt() } else { 0.0 };
    let mut x = g.mean_mg_dl + sd_stationary * normal(rng);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            x = g.mean_mg_dl + (x - g.mean_mg_dl) * decay + sd_step * normal(rng);
        }
        let base = x.max(g.floor_mg_dl);
        let t = (k as i64 * cfg.cgm_step_s) as f64;
        let (env, nadir) = events
            .iter()
            .find(|e| e.onset_s as f64 <= t && t <= e.end_s as f64)
            .map_or((0.0, 0.0), |e| (e.envelope(t), e.nadir_mg_dl));
        out.push(base * (1.0 - env) + nadir * env);
    }
    out
}

fn coupled_mask(events: &[SimEvent], times: impl Iterator<Item = f64>) -> Vec<bool> {
    // Events are time-ordered, so a single cursor suffices.
    let mut cursor = 0;
    times
        .map(|t| {
            while cursor < events.len() && (events[cursor].end_s as f64) < t {
                cursor += 1;
            }
            cursor < events.len() && events[cursor].coupled(t)
        })
        .collect()
}

fn gsr_series(cfg: &SimConfig, events: &[SimEvent], rng: &mut Rng) -> Vec<f64> {
    let c = &cfg.gsr;
    let horizon = cfg.horizon_s() as f64;
    let n = (horizon * c.fs_hz).round() as usize;
    let dt = 1.0 / c.fs_hz;

    // Tonic knots every grid step, mean reverting, kept positive.
    let step = GRID_STEP_S as f64;
    let n_knots = (horizon / step).ceil() as usize + 2;
    let mut knots = Vec::with_capacity(n_knots);
    let mut x = c.tonic_mean_us;
    for _ in 0..n_knots {
        knots.push(x);
        x += c.tonic_reversion_per_step * (c.tonic_mean_us - x) + c.tonic_sigma_us * normal(rng);
        x = x.max(0.1);
    }
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 * dt;
            let k = (t / step) as usize;
            let f = t / step - k as f64;
            knots[k] * (1.0 - f) + knots[k + 1] * f
        })
        .collect();

    // SCR candidates at the maximal rate, thinned to the local rate. Every
    // candidate consumes the same draws whether or not it is kept.
    let factor = cfg.coupling.scr_rate_factor.max(1.0);
    let base_rate_s = c.scr_rate_per_min / 60.0;
    let peak_t = (c.tau1_s / c.tau2_s).ln() * c.tau1_s * c.tau2_s / (c.tau1_s - c.tau2_s);
    let peak = (-peak_t / c.tau1_s).exp() - (-peak_t / c.tau2_s).exp();
    let kernel_span = c.tau1_s * 23.0;
    if base_rate_s > 0.0 {
        let mut t = 0.0;
        let mut cursor = 0;
        loop {
            t += exponential(rng, 1.0 / (base_rate_s * factor));
            let u: f64 = rng.gen();
            let amp = exponential(rng, c.scr_amp_mean_us);
            if t >= horizon {
                break;
            }
            while cursor < events.len() && (events[cursor].end_s as f64) < t {
                cursor += 1;
            }
            let local = if cursor < events.len() && events[cursor].coupled(t) {
                cfg.coupling.scr_rate_factor
            } else {
                1.0
            };
            if u * factor >= local {
                continue;
            }
            let first = (t / dt).ceil() as usize;
            let last = (((t + kernel_span) / dt) as usize).min(n.saturating_sub(1));
            for (i, v) in out.iter_mut().enumerate().take(last + 1).skip(first) {
                let s = i as f64 * dt - t;
                *v += amp * ((-s / c.tau1_s).exp() - (-s / c.tau2_s).exp()) / peak;
            }
        }
    }
    for v in &mut out {
        *v += c.noise_us * normal(rng);
    }
    out
}

fn hr_series(cfg: &SimConfig, events: &[SimEvent], rng: &mut Rng) -> Vec<f64> {
    let c = &cfg.hr;
    let horizon = cfg.horizon_s() as f64;
    let n = (horizon * c.fs_hz).round() as usize;
    let dt = 1.0 / c.fs_hz;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let mut out: Vec<f64> =
        (0..n).map(|i| c.mean_bpm + c.circadian_amp_bpm * (2.0 * PI * i as f64 * dt / 86_400.0 + phase).sin()).collect();
    if c.activity_rate_per_day > 0.0 {
        let mut t = 0.0;
        loop {
            t += exponential(rng, 86_400.0 / c.activity_rate_per_day);
            let amp = uniform(rng, c.activity_bpm);
            let dur = uniform(rng, c.activity_min) * 60.0;
            if t >= horizon {
                break;
            }
            let first = (t / dt).ceil() as usize;
            let last = (((t + dur) / dt) as usize).min(n.saturating_sub(1));
            for (i, v) in out.iter_mut().enumerate().take(last + 1).skip(first) {
                *v += amp * (PI * (i as f64 * dt - t) / dur).sin();
            }
        }
    }
    let mask = coupled_mask(events, (0..n).map(|i| i as f64 * dt));
    for (v, m) in out.iter_mut().zip(mask) {
        *v += c.noise_bpm * normal(rng);
        if m {
            *v += cfg.coupling.hr_offset_bpm;
        }
    }
    out
}

/// Stream indices under a subject seed.
const EVENT_STREAM: u64 = 0;
const GSR_STREAM: u64 = 1;
const HR_STREAM: u64 = 2;

pub fn subject_id(index: usize) -> String {
    format!("sim{index:03}")
}

pub fn simulate_subject(cfg: &SimConfig, subject: &str, seed: u64) -> Result<(SubjectBundle, SimTruth), SynthError> {
    cfg.validate()?;
    let mut ev_rng = rng_from_seed(derive_seed(seed, EVENT_STREAM));
    let events = draw_events(cfg, &mut ev_rng);
    let glucose = glucose_series(cfg, &events, &mut ev_rng);
    let gsr = gsr_series(cfg, &events, &mut rng_from_seed(derive_seed(seed, GSR_STREAM)));
    let hr = hr_series(cfg, &events, &mut rng_from_seed(derive_seed(seed, HR_STREAM)));

    let start = TimeInstant::new(cfg.start_epoch_s).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let at_rate = |vals: Vec<f64>, fs: f64| -> Vec<(TimeInstant, f64)> {
        vals.into_iter().enumerate().map(|(i, v)| (start.offset((i as f64 / fs).round() as i64), v)).collect()
    };
    let cgm: Vec<(TimeInstant, f64)> =
        glucose.into_iter().enumerate().map(|(k, v)| (start.offset(k as i64 * cfg.cgm_step_s), v)).collect();
    let mut series = BTreeMap::new();
    series.insert(Channel::Cgm, SampleSeries::new(subject, Channel::Cgm, cgm));
    series.insert(Channel::Gsr, SampleSeries::new(subject, Channel::Gsr, at_rate(gsr, cfg.gsr.fs_hz)));
    series.insert(Channel::Hr, SampleSeries::new(subject, Channel::Hr, at_rate(hr, cfg.hr.fs_hz)));
    let bundle = SubjectBundle::new(subject, series, BundleSource::Synthetic)
        .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    Ok((bundle, SimTruth { subject_id: subject.to_string(), start, events }))
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub bundles: Vec<SubjectBundle>,
    pub truths: Vec<SimTruth>,
    pub prevalence: f64,
    /// Event-rate multiplier applied on the single regeneration, if any.
    pub rate_adjustment: Option<f64>,
}

/// Fraction of hypo labels among the CGM samples that end a window.
pub fn label_prevalence(bundles: &[SubjectBundle], window_length: usize) -> f64 {
    let (mut pos, mut total) = (0usize, 0usize);
    for b in bundles {
        if let Some(cgm) = b.get(Channel::Cgm) {
            for &(_, v) in cgm.samples.iter().skip(window_length.saturating_sub(1)) {
                total += 1;
                pos += (v < crate::dataset::HYPO_THRESHOLD_MG_DL) as usize;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        pos as f64 / total as f64
    }
}

/// Subject `i` is generated from `derive_seed(master_seed, i)`.
pub fn generate_cohort(cfg: &SimConfig, n_subjects: usize, master_seed: u64) -> Result<Cohort, SynthError> {
    if n_subjects == 0 {
        return Err(SynthError::InvalidConfig("n_subjects must be >= 1".into()));
    }
    let mut bundles = Vec::with_capacity(n_subjects);
    let mut truths = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        let (b, t) = simulate_subject(cfg, &subject_id(i), derive_seed(master_seed, i as u64))?;
        bundles.push(b);
        truths.push(t);
    }
    let prevalence = label_prevalence(&bundles, cfg.window_length);
    Ok(Cohort { bundles, truths, prevalence, rate_adjustment: None })
}

/// Like [`generate_cohort`], but when pooled prevalence leaves the target
/// band the event rate is rescaled toward the band centre and the cohort
/// regenerated once.
pub fn simulate_cohort(cfg: &SimConfig, n_subjects: usize, master_seed: u64) -> Result<Cohort, SynthError> {
    let (lo, hi) = cfg.prevalence_band;
    let in_band = |p: f64| p >= lo && p <= hi;
    let cohort = generate_cohort(cfg, n_subjects, master_seed)?;
    if in_band(cohort.prevalence) {
        return Ok(cohort);
    }
    if cohort.prevalence <= 0.0 {
        return Err(SynthError::PrevalenceOutOfBand { prevalence: 0.0, lo, hi });
    }
    let scale = 0.5 * (lo + hi) / cohort.prevalence;
    log::warn!("synthetic prevalence {:.4} outside [{lo}, {hi}]; regenerating with event rate x{scale:.3}", cohort.prevalence);
    let mut adjusted = cfg.clone();
    adjusted.events.rate_per_day *= scale;
    let mut retry = generate_cohort(&adjusted, n_subjects, master_seed)?;
    if !in_band(retry.prevalence) {
        return Err(SynthError::PrevalenceOutOfBand { prevalence: retry.prevalence, lo, hi });
    }
    retry.rate_adjustment = Some(scale);
    Ok(retry)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(days: f64) -> SimConfig {
        SimConfig { days, ..Default::default() }
    }

    #[test]
    fn default_week_has_2016_cgm_samples() {
        let (b, _) = simulate_subject(&SimConfig::default(), "s", 1).unwrap();
        assert_eq!(b.get(Channel::Cgm).unwrap().len(), 2016);
        assert_eq!(b.get(Channel::Gsr).unwrap().len(), 7 * 86_400);
    }

    #[test]
    fn same_seed_is_identical() {
        let cfg = short(1.0);
        let a = simulate_subject(&cfg, "s", 7).unwrap();
        let b = simulate_subject(&cfg, "s", 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, simulate_subject(&cfg, "s", 8).unwrap().0);
    }

    #[test]
    fn events_are_ordered_and_disjoint() {
        let cfg = SimConfig { events: EventCfg { rate_per_day: 5.0, ..Default::default() }, ..short(3.0) };
        let (_, truth) = simulate_subject(&cfg, "s", 3).unwrap();
        assert!(truth.events.len() > 3);
        for e in &truth.events {
            assert!(e.onset_s < e.nadir_s && e.nadir_s <= e.hold_end_s && e.hold_end_s < e.end_s);
            assert!((20 * 60..=40 * 60).contains(&e.lead_s));
        }
        for w in truth.events.windows(2) {
            assert!(w[0].end_s < w[1].coupling_start_s());
        }
    }

    #[test]
    fn glucose_below_threshold_only_inside_events() {
        let cfg = SimConfig { events: EventCfg { rate_per_day: 3.0, ..Default::default() }, ..short(4.0) };
        for seed in 0..5 {
            let (b, truth) = simulate_subject(&cfg, "s", seed).unwrap();
            let mut below = 0;
            for &(t, v) in &b.get(Channel::Cgm).unwrap().samples {
                if v < 70.0 {
                    below += 1;
                    assert!(truth.in_event(t), "seed {seed}: {v} at {t:?} outside events");
                }
            }
            assert!(below > 0);
            for e in &truth.events {
                let t = truth.start.offset(e.nadir_s + (e.hold_end_s - e.nadir_s) / 2);
                let k = ((t.seconds() - truth.start.seconds()) / cfg.cgm_step_s) as usize;
                let v = b.get(Channel::Cgm).unwrap().samples[k].1;
                assert!(v < 70.0 || e.hold_end_s - e.nadir_s < cfg.cgm_step_s);
            }
        }
    }

    #[test]
    fn neutral_coupling_leaves_physiology_independent_of_events() {
        // With neutral coupling the GSR and HR streams do not read the event
        // stream at all: changing the event rate leaves them bit-identical.
        let base = SimConfig { coupling: CouplingCfg::neutral(), ..short(1.0) };
        let more = SimConfig { events: EventCfg { rate_per_day: 6.0, ..Default::default() }, ..base.clone() };
        let (a, ta) = simulate_subject(&base, "s", 11).unwrap();
        let (b, tb) = simulate_subject(&more, "s", 11).unwrap();
        assert_ne!(ta.events, tb.events);
        assert_eq!(a.get(Channel::Gsr), b.get(Channel::Gsr));
        assert_eq!(a.get(Channel::Hr), b.get(Channel::Hr));
    }

    #[test]
    fn coupling_raises_hr_inside_windows() {
        let cfg = SimConfig { events: EventCfg { rate_per_day: 4.0, ..Default::default() }, ..short(2.0) };
        let neutral = SimConfig { coupling: CouplingCfg::neutral(), ..cfg.clone() };
        let (a, truth) = simulate_subject(&cfg, "s", 2).unwrap();
        let (b, _) = simulate_subject(&neutral, "s", 2).unwrap();
        let (ha, hb) = (a.get(Channel::Hr).unwrap(), b.get(Channel::Hr).unwrap());
        for (&(t, x), &(_, y)) in ha.samples.iter().zip(&hb.samples).step_by(97) {
            let d = x - y;
            if truth.coupled_at(t) {
                assert!((d - 8.0).abs() < 1e-9);
            } else {
                assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn zero_event_rate_is_out_of_band() {
        let cfg = SimConfig { events: EventCfg { rate_per_day: 0.0, ..Default::default() }, ..short(1.0) };
        let c = generate_cohort(&cfg, 2, 1).unwrap();
        assert_eq!(c.prevalence, 0.0);
        assert!(matches!(simulate_cohort(&cfg, 2, 1), Err(SynthError::PrevalenceOutOfBand { .. })));
    }

    #[test]
    fn cohort_prefix_is_stable() {
        let cfg = short(1.0);
        let one = generate_cohort(&cfg, 1, 99).unwrap();
        let three = generate_cohort(&cfg, 3, 99).unwrap();
        assert_eq!(one.bundles[0], three.bundles[0]);
        assert_eq!(one.truths[0], three.truths[0]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SimConfig::default();
        cfg.gsr.noise_us = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::default();
        cfg.events.nadir_mg_dl = (60.0, 50.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn truth_csv_layout() {
        let cfg = SimConfig { events: EventCfg { rate_per_day: 4.0, ..Default::default() }, ..short(1.0) };
        let (_, t) = simulate_subject(&cfg, "s", 5).unwrap();
        let mut buf = Vec::new();
        write_truth_csv(std::slice::from_ref(&t), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("subject,onset,nadir_time,end,lead_s"));
        assert_eq!(lines.count(), t.events.len());
    }
}
