//! Shared domain types: timestamps, channels, raw sample series and the
//! fixed 5-minute grid every other stage works on.

use std::fmt;
use std::io::{Read, Write};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid spacing in seconds. Matches the CGM cadence and is not configurable.
pub const GRID_STEP_S: i64 = 300;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("timestamp {t} outside grid [{start}, {end})")]
    OutOfRange { t: i64, start: i64, end: i64 },
    #[error("negative timestamp {0}")]
    NegativeTime(i64),
    #[error("invalid ISO-8601 timestamp {0:?}")]
    BadTimestamp(String),
    #[error("grid series must hold at least one bin")]
    EmptyGrid,
    #[error("values and missing mask differ in length ({values} vs {missing})")]
    MaskLength { values: usize, missing: usize },
    #[error("grid csv: {0}")]
    Csv(String),
}

/// Whole seconds since the Unix epoch (UTC).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct TimeInstant(i64);

impl TimeInstant {
    pub fn new(seconds_since_epoch: i64) -> Result<Self, GridError> {
        if seconds_since_epoch < 0 {
            return Err(GridError::NegativeTime(seconds_since_epoch));
        }
        Ok(Self(seconds_since_epoch))
    }

    pub fn seconds(self) -> i64 {
        self.0
    }

    /// Shift by a signed number of seconds, saturating at the epoch.
    pub fn offset(self, seconds: i64) -> Self {
        Self((self.0 + seconds).max(0))
    }

    pub fn parse_iso8601(s: &str) -> Result<Self, GridError> {
        let dt = DateTime::parse_from_rfc3339(s.trim())
            .map_err(|_| GridError::BadTimestamp(s.to_string()))?;
        if dt.timestamp_subsec_nanos() != 0 {
            return Err(GridError::BadTimestamp(s.to_string()));
        }
        Self::new(dt.timestamp()).map_err(|_| GridError::BadTimestamp(s.to_string()))
    }

    pub fn to_iso8601(self) -> String {
        DateTime::<Utc>::from_timestamp(self.0, 0)
            .expect("non-negative i64 seconds fit chrono's range")
            .to_rfc3339_opts(SecondsFormat::Secs, true)
    }
}

impl TryFrom<i64> for TimeInstant {
    type Error = GridError;
    fn try_from(v: i64) -> Result<Self, GridError> {
        Self::new(v)
    }
}

impl From<TimeInstant> for i64 {
    fn from(t: TimeInstant) -> i64 {
        t.0
    }
}

impl fmt::Display for TimeInstant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso8601())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Microsiemens,
    Bpm,
    MgPerDl,
}

impl Units {
    pub fn as_str(self) -> &'static str {
        match self {
            Units::Microsiemens => "microsiemens",
            Units::Bpm => "bpm",
            Units::MgPerDl => "mg_per_dL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "microsiemens" | "uS" => Some(Units::Microsiemens),
            "bpm" => Some(Units::Bpm),
            "mg_per_dL" | "mg/dL" => Some(Units::MgPerDl),
            _ => None,
        }
    }
}

/// Physiological channel. Units are implied by the kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Gsr,
    Hr,
    Cgm,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Gsr, Channel::Hr, Channel::Cgm];

    pub fn units(self) -> Units {
        match self {
            Channel::Gsr => Units::Microsiemens,
            Channel::Hr => Units::Bpm,
            Channel::Cgm => Units::MgPerDl,
        }
    }

    /// Inclusive plausibility band. Values outside it are reported, not rejected.
    pub fn plausible_range(self) -> (f64, f64) {
        match self {
            Channel::Gsr => (0.0, 100.0),
            Channel::Hr => (25.0, 250.0),
            Channel::Cgm => (10.0, 600.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Gsr => "gsr",
            Channel::Hr => "hr",
            Channel::Cgm => "cgm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gsr" => Some(Channel::Gsr),
            "hr" => Some(Channel::Hr),
            "cgm" => Some(Channel::Cgm),
            _ => None,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Raw, irregularly sampled channel recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSeries {
    pub subject_id: String,
    pub channel: Channel,
    pub samples: Vec<(TimeInstant, f64)>,
}

impl SampleSeries {
    pub fn new(subject_id: impl Into<String>, channel: Channel, samples: Vec<(TimeInstant, f64)>) -> Self {
        Self { subject_id: subject_id.into(), channel, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|&(_, v)| v)
    }

    /// Median inter-sample interval in seconds, if at least two samples exist.
    pub fn median_interval_s(&self) -> Option<f64> {
        if self.samples.len() < 2 {
            return None;
        }
        let mut dts: Vec<i64> = self
            .samples
            .windows(2)
            .map(|w| w[1].0.seconds() - w[0].0.seconds())
            .filter(|&d| d > 0)
            .collect();
        if dts.is_empty() {
            return None;
        }
        dts.sort_unstable();
        Some(dts[dts.len() / 2] as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NonMonotonicTimestamp { index: usize },
    NonFinite { index: usize },
    OutOfBand { index: usize, value: f64 },
}

/// Report-only validation. An empty result means the series is clean.
pub fn validate_series(s: &SampleSeries) -> Vec<Violation> {
    let (lo, hi) = s.channel.plausible_range();
    let mut out = Vec::new();
    for (i, &(t, v)) in s.samples.iter().enumerate() {
        if i > 0 && t <= s.samples[i - 1].0 {
            out.push(Violation::NonMonotonicTimestamp { index: i });
        }
        if !v.is_finite() {
            out.push(Violation::NonFinite { index: i });
        } else if v < lo || v > hi {
            out.push(Violation::OutOfBand { index: i, value: v });
        }
    }
    out
}

/// Channel values aligned to the 5-minute grid with a missingness mask.
///
/// Missing bins hold `NaN`; consumers go through [`GridSeries::get`] or the
/// mask and never read them.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GridSeriesRepr", into = "GridSeriesRepr")]
pub struct GridSeries {
    pub subject_id: String,
    pub channel: Channel,
    pub start: TimeInstant,
    values: Vec<f64>,
    missing: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct GridSeriesRepr {
    subject_id: String,
    channel: Channel,
    start: TimeInstant,
    values: Vec<Option<f64>>,
}

impl From<GridSeries> for GridSeriesRepr {
    fn from(g: GridSeries) -> Self {
        let values = g.to_options();
        Self { subject_id: g.subject_id, channel: g.channel, start: g.start, values }
    }
}

impl TryFrom<GridSeriesRepr> for GridSeries {
    type Error = GridError;
    fn try_from(r: GridSeriesRepr) -> Result<Self, GridError> {
        GridSeries::from_options(r.subject_id, r.channel, r.start, &r.values)
    }
}

impl PartialEq for GridSeries {
    /// Missing bins compare equal regardless of their sentinel payload.
    fn eq(&self, other: &Self) -> bool {
        self.subject_id == other.subject_id
            && self.channel == other.channel
            && self.start == other.start
            && self.missing == other.missing
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.missing)
                .all(|((a, b), &m)| m || a == b)
    }
}

impl GridSeries {
    pub fn from_parts(
        subject_id: impl Into<String>,
        channel: Channel,
        start: TimeInstant,
        values: Vec<f64>,
        missing: Vec<bool>,
    ) -> Result<Self, GridError> {
        if values.is_empty() {
            return Err(GridError::EmptyGrid);
        }
        if values.len() != missing.len() {
            return Err(GridError::MaskLength { values: values.len(), missing: missing.len() });
        }
        let values = values
            .into_iter()
            .zip(&missing)
            .map(|(v, &m)| if m || !v.is_finite() { f64::NAN } else { v })
            .collect::<Vec<_>>();
        let missing = values.iter().map(|v| v.is_nan()).collect();
        Ok(Self { subject_id: subject_id.into(), channel, start, values, missing })
    }

    /// Grid with every bin observed. Non-finite entries become missing.
    pub fn from_values(
        subject_id: impl Into<String>,
        channel: Channel,
        start: TimeInstant,
        values: Vec<f64>,
    ) -> Result<Self, GridError> {
        let missing = vec![false; values.len()];
        Self::from_parts(subject_id, channel, start, values, missing)
    }

    /// Grid from optional values (`None` = missing).
    pub fn from_options(
        subject_id: impl Into<String>,
        channel: Channel,
        start: TimeInstant,
        values: &[Option<f64>],
    ) -> Result<Self, GridError> {
        let missing = values.iter().map(Option::is_none).collect();
        let vals = values.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        Self::from_parts(subject_id, channel, start, vals, missing)
    }

    pub fn step_s(&self) -> i64 {
        GRID_STEP_S
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end(&self) -> TimeInstant {
        self.start.offset(GRID_STEP_S * self.values.len() as i64)
    }

    pub fn time_of(&self, bin: usize) -> TimeInstant {
        self.start.offset(GRID_STEP_S * bin as i64)
    }

    pub fn get(&self, bin: usize) -> Option<f64> {
        if self.missing[bin] {
            None
        } else {
            Some(self.values[bin])
        }
    }

    pub fn is_missing(&self, bin: usize) -> bool {
        self.missing[bin]
    }

    pub fn missing_mask(&self) -> &[bool] {
        &self.missing
    }

    /// Raw value buffer; missing bins are `NaN`.
    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_options(&self) -> Vec<Option<f64>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn observed(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .zip(&self.missing)
            .enumerate()
            .filter(|(_, (_, &m))| !m)
            .map(|(i, (&v, _))| (i, v))
    }

    pub fn observed_count(&self) -> usize {
        self.missing.iter().filter(|&&m| !m).count()
    }

    /// Same metadata, new per-bin values.
    pub fn with_options(&self, values: &[Option<f64>]) -> Self {
        Self::from_options(self.subject_id.clone(), self.channel, self.start, values)
            .expect("same length as an existing non-empty grid")
    }

    pub fn bin_index(&self, t: TimeInstant) -> Result<usize, GridError> {
        bin_index(t, self)
    }

    /// `bin,value,missing` CSV; missing bins carry an empty value field.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), GridError> {
        let mut wr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| GridError::Csv(e.to_string());
        wr.write_record(["bin", "value", "missing"]).map_err(err)?;
        for i in 0..self.len() {
            let v = self.get(i).map(|v| format!("{v:?}")).unwrap_or_default();
            let m = if self.missing[i] { "1" } else { "0" };
            wr.write_record([i.to_string(), v, m.to_string()]).map_err(err)?;
        }
        wr.flush().map_err(|e| GridError::Csv(e.to_string()))
    }

    pub fn read_csv<R: Read>(
        r: R,
        subject_id: impl Into<String>,
        channel: Channel,
        start: TimeInstant,
    ) -> Result<Self, GridError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut vals = Vec::new();
        for (expect, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| GridError::Csv(e.to_string()))?;
            let bin: usize = rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| GridError::Csv(format!("bad bin on row {expect}")))?;
            if bin != expect {
                return Err(GridError::Csv(format!("expected bin {expect}, found {bin}")));
            }
            let missing = rec.get(2).map(|s| s.trim() == "1").unwrap_or(true);
            let v = if missing {
                None
            } else {
                Some(
                    rec.get(1)
                        .and_then(|s| s.parse::<f64>().ok())
                        .ok_or_else(|| GridError::Csv(format!("bad value on row {expect}")))?,
                )
            };
            vals.push(v);
        }
        Self::from_options(subject_id, channel, start, &vals)
    }
}

/// Index of the grid bin containing `t`: `floor((t - start) / 300)`.
pub fn bin_index(t: TimeInstant, grid: &GridSeries) -> Result<usize, GridError> {
    let dt = t.seconds() - grid.start.seconds();
    let end = grid.end().seconds();
    if dt < 0 || t.seconds() >= end {
        return Err(GridError::OutOfRange { t: t.seconds(), start: grid.start.seconds(), end });
    }
    Ok((dt / GRID_STEP_S) as usize)
}

/// Glycemic state of a CGM reading.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Hypo,
    Normal,
}

impl Label {
    pub fn is_hypo(self) -> bool {
        self == Label::Hypo
    }

    pub fn as_f64(self) -> f64 {
        if self.is_hypo() {
            1.0
        } else {
            0.0
        }
    }
}
