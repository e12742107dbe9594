//! Reading per-subject sensor bundles.
//!
//! The interchange format is a directory per subject holding `cgm.csv`,
//! `gsr.csv` and `hr.csv`, each with a `timestamp,value` header and ISO-8601
//! UTC timestamps. A cohort-level `manifest.csv` (`subject_id,channel,units,path`,
//! paths relative to the manifest) lists the files. An adapter reads the
//! per-patient XML layout of the OhioT1DM release.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Partition, SplitPlan};
use crate::grid::{Channel, SampleSeries, TimeInstant, Units};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("subject {0}: no CGM series")]
    MissingCgm(String),
    #[error("subject {0}: neither GSR nor HR present")]
    MissingPhysiology(String),
    #[error("subject {subject}: {channel} file yielded no valid rows")]
    EmptySeries { subject: String, channel: Channel },
    #[error("subject {subject}: {channel} declared as {declared}, expected {expected}")]
    UnitsMismatch { subject: String, channel: Channel, declared: String, expected: &'static str },
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("schema mismatch at {0}")]
    SchemaMismatch(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleSource {
    CsvBundle,
    OhioXml,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectBundle {
    pub subject_id: String,
    pub series: BTreeMap<Channel, SampleSeries>,
    pub source: BundleSource,
    /// Rows dropped while parsing, per channel.
    pub skipped_rows: BTreeMap<Channel, usize>,
}

impl SubjectBundle {
    /// Checks the bundle invariants: CGM present, GSR and/or HR present, and
    /// every series tagged with the bundle's subject and channel.
    pub fn new(
        subject_id: impl Into<String>,
        series: BTreeMap<Channel, SampleSeries>,
        source: BundleSource,
    ) -> Result<Self, IngestError> {
        let subject_id = subject_id.into();
        if !series.contains_key(&Channel::Cgm) {
            return Err(IngestError::MissingCgm(subject_id));
        }
        if !series.contains_key(&Channel::Gsr) && !series.contains_key(&Channel::Hr) {
            return Err(IngestError::MissingPhysiology(subject_id));
        }
        for (ch, s) in &series {
            if s.subject_id != subject_id || s.channel != *ch {
                return Err(IngestError::Manifest(format!(
                    "series {}/{} filed under {}/{}",
                    s.subject_id, s.channel, subject_id, ch
                )));
            }
        }
        Ok(Self { subject_id, series, source, skipped_rows: BTreeMap::new() })
    }

    pub fn get(&self, ch: Channel) -> Option<&SampleSeries> {
        self.series.get(&ch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub units: Units,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub subject_id: String,
    pub files: BTreeMap<Channel, ManifestEntry>,
}

impl BundleManifest {
    /// Manifest for a subject directory using the conventional file names;
    /// absent files are simply not listed.
    pub fn for_directory(subject_id: impl Into<String>, dir: &Path) -> Self {
        let files = Channel::ALL
            .into_iter()
            .filter_map(|ch| {
                let path = dir.join(format!("{}.csv", ch.as_str()));
                path.exists().then(|| (ch, ManifestEntry { path, units: ch.units() }))
            })
            .collect();
        Self { subject_id: subject_id.into(), files }
    }
}

/// Read `manifest.csv`; relative paths resolve against the manifest's folder.
pub fn read_manifest(path: &Path) -> Result<Vec<BundleManifest>, IngestError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rd = csv::Reader::from_reader(File::open(path).map_err(|_| IngestError::MissingFile(path.into()))?);
    let mut by_subject: BTreeMap<String, BTreeMap<Channel, ManifestEntry>> = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        let subject = get(0).to_string();
        let ch = Channel::parse(get(1)).ok_or_else(|| IngestError::Manifest(format!("unknown channel {:?}", get(1))))?;
        let units = Units::parse(get(2)).ok_or_else(|| IngestError::Manifest(format!("unknown units {:?}", get(2))))?;
        let p = PathBuf::from(get(3));
        let p = if p.is_absolute() { p } else { base.join(p) };
        by_subject.entry(subject).or_default().insert(ch, ManifestEntry { path: p, units });
    }
    Ok(by_subject
        .into_iter()
        .map(|(subject_id, files)| BundleManifest { subject_id, files })
        .collect())
}

pub fn write_manifest(path: &Path, manifests: &[BundleManifest]) -> Result<(), IngestError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut wr = csv::Writer::from_writer(File::create(path)?);
    wr.write_record(["subject_id", "channel", "units", "path"])?;
    for m in manifests {
        for (ch, e) in &m.files {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
            wr.write_record([
                m.subject_id.as_str(),
                ch.as_str(),
                e.units.as_str(),
                &rel.to_string_lossy(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Parse one `timestamp,value` CSV. Returns the rows sorted by time and the
/// number of rows skipped as unparseable.
pub fn parse_series_csv<R: Read>(
    r: R,
    subject_id: &str,
    channel: Channel,
) -> Result<(SampleSeries, usize), IngestError> {
    let mut rd = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let mut samples = Vec::new();
    let mut skipped = 0;
    for rec in rd.records() {
        let Ok(rec) = rec else {
            skipped += 1;
            continue;
        };
        let parsed = match (rec.get(0), rec.get(1)) {
            (Some(ts), Some(v)) => TimeInstant::parse_iso8601(ts)
                .ok()
                .zip(v.trim().parse::<f64>().ok().filter(|x| x.is_finite())),
            _ => None,
        };
        match parsed {
            Some(s) => samples.push(s),
            None => skipped += 1,
        }
    }
    samples.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok((SampleSeries::new(subject_id, channel, samples), skipped))
}

pub fn write_series_csv<W: Write>(s: &SampleSeries, w: W) -> Result<(), IngestError> {
    let mut w = BufWriter::new(w);
    writeln!(w, "timestamp,value")?;
    for (t, v) in &s.samples {
        writeln!(w, "{},{v:?}", t.to_iso8601())?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_csv_bundle(manifest: &BundleManifest) -> Result<SubjectBundle, IngestError> {
    let sid = &manifest.subject_id;
    if !manifest.files.contains_key(&Channel::Cgm) {
        return Err(IngestError::MissingCgm(sid.clone()));
    }
    let mut series = BTreeMap::new();
    let mut skipped_rows = BTreeMap::new();
    for (&ch, entry) in &manifest.files {
        if entry.units != ch.units() {
            return Err(IngestError::UnitsMismatch {
                subject: sid.clone(),
                channel: ch,
                declared: entry.units.as_str().to_string(),
                expected: ch.units().as_str(),
            });
        }
        let f = File::open(&entry.path).map_err(|_| IngestError::MissingFile(entry.path.clone()))?;
        let (s, skipped) = parse_series_csv(BufReader::new(f), sid, ch)?;
        if s.is_empty() {
            return Err(IngestError::EmptySeries { subject: sid.clone(), channel: ch });
        }
        if skipped > 0 {
            log::warn!("{sid}/{ch}: skipped {skipped} unparseable rows");
        }
        skipped_rows.insert(ch, skipped);
        series.insert(ch, s);
    }
    let mut b = SubjectBundle::new(sid.clone(), series, BundleSource::CsvBundle)?;
    b.skipped_rows = skipped_rows;
    Ok(b)
}

/// Write a bundle as `<dir>/{cgm,gsr,hr}.csv` and return its manifest.
pub fn write_csv_bundle(bundle: &SubjectBundle, dir: &Path) -> Result<BundleManifest, IngestError> {
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    for (&ch, s) in &bundle.series {
        let path = dir.join(format!("{}.csv", ch.as_str()));
        write_series_csv(s, File::create(&path)?)?;
        files.insert(ch, ManifestEntry { path, units: ch.units() });
    }
    Ok(BundleManifest { subject_id: bundle.subject_id.clone(), files })
}

/// Elements of the OhioT1DM per-patient layout that carry no signal used
/// here; they are accepted and skipped.
const OHIO_IGNORED: &[&str] = &[
    "finger_stick",
    "basal",
    "temp_basal",
    "bolus",
    "meal",
    "sleep",
    "work",
    "stressors",
    "hypo_event",
    "illness",
    "exercise",
    "basis_skin_temperature",
    "basis_air_temperature",
    "basis_steps",
    "basis_sleep",
    "acceleration",
];

fn ohio_channel(tag: &str) -> Option<Channel> {
    match tag {
        "glucose_level" => Some(Channel::Cgm),
        "basis_gsr" => Some(Channel::Gsr),
        "basis_heart_rate" => Some(Channel::Hr),
        _ => None,
    }
}

/// Accepts `dd-mm-YYYY HH:MM:SS` (the dataset's convention) or ISO-8601.
fn parse_ohio_ts(s: &str) -> Option<TimeInstant> {
    if let Ok(t) = TimeInstant::parse_iso8601(s) {
        return Some(t);
    }
    let dt = NaiveDateTime::parse_from_str(s.trim(), "%d-%m-%Y %H:%M:%S").ok()?;
    TimeInstant::new(dt.and_utc().timestamp()).ok()
}

pub fn parse_ohio_xml(path: &Path) -> Result<SubjectBundle, IngestError> {
    let text = fs::read_to_string(path).map_err(|_| IngestError::MissingFile(path.into()))?;
    parse_ohio_xml_str(&text)
}

pub fn parse_ohio_xml_str(text: &str) -> Result<SubjectBundle, IngestError> {
    let doc = roxmltree::Document::parse(text).map_err(|e| IngestError::SchemaMismatch(format!("/ ({e})")))?;
    let root = doc.root_element();
    if root.tag_name().name() != "patient" {
        return Err(IngestError::SchemaMismatch(format!("/{}", root.tag_name().name())));
    }
    let sid = root
        .attribute("id")
        .ok_or_else(|| IngestError::SchemaMismatch("/patient@id".into()))?
        .to_string();
    let mut series = BTreeMap::new();
    for parent in root.children().filter(|n| n.is_element()) {
        let tag = parent.tag_name().name();
        let Some(ch) = ohio_channel(tag) else {
            if OHIO_IGNORED.contains(&tag) {
                continue;
            }
            return Err(IngestError::SchemaMismatch(format!("/patient/{tag}")));
        };
        let mut samples = Vec::new();
        for ev in parent.children().filter(|n| n.is_element()) {
            let path = format!("/patient/{tag}/{}", ev.tag_name().name());
            if ev.tag_name().name() != "event" {
                return Err(IngestError::SchemaMismatch(path));
            }
            let t = ev
                .attribute("ts")
                .and_then(parse_ohio_ts)
                .ok_or_else(|| IngestError::SchemaMismatch(format!("{path}@ts")))?;
            let v = ev
                .attribute("value")
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| IngestError::SchemaMismatch(format!("{path}@value")))?;
            samples.push((t, v));
        }
        samples.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        series.insert(ch, SampleSeries::new(sid.clone(), ch, samples));
    }
    SubjectBundle::new(sid, series, BundleSource::OhioXml)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LeakageViolation {
    SharedSubject { subject: String, partitions: Vec<Partition> },
    EmptyPartition(Partition),
    UnknownSubject(String),
}

/// Verify a split keeps every subject inside exactly one partition.
///
/// Validation may be empty for leave-one-subject-out plans; train and test
/// never may.
pub fn leakage_guard(bundles: &[SubjectBundle], plan: &SplitPlan) -> Result<(), Vec<LeakageViolation>> {
    let mut out = Vec::new();
    let known: BTreeSet<&str> = bundles.iter().map(|b| b.subject_id.as_str()).collect();
    let parts = [
        (Partition::Train, &plan.train),
        (Partition::Val, &plan.val),
        (Partition::Test, &plan.test),
    ];
    for (p, set) in parts {
        if set.is_empty() && !(p == Partition::Val && plan.fallback) {
            out.push(LeakageViolation::EmptyPartition(p));
        }
    }
    let all: BTreeSet<&String> = parts.iter().flat_map(|(_, s)| s.iter()).collect();
    for s in all {
        let member: Vec<Partition> = parts.iter().filter(|(_, set)| set.contains(s)).map(|(p, _)| *p).collect();
        if member.len() > 1 {
            out.push(LeakageViolation::SharedSubject { subject: s.clone(), partitions: member });
        }
        if !known.is_empty() && !known.contains(s.as_str()) {
            out.push(LeakageViolation::UnknownSubject(s.clone()));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
