//! Bag capture, on-disk layout and post-run metrics.
//!
//! A bag directory holds `manifest.json` plus one CSV per topic. Topic
//! `/ego/lead_dist` is written to `ego-lead_dist.csv` with header
//! `Time,data`; twist topics flatten to `linear.x ... angular.z`. Numbers use
//! the shortest representation that parses back to the same `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msgbus::Schema;

pub const MANIFEST_FILE: &str = "manifest.json";
const BAG_FORMAT: &str = "catsim-bag";
const BAG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecorderError {
    #[error("topic {0} is not registered in the bag")]
    UnknownTopic(String),
    #[error("topic {topic} expects {expected} fields, got {got}")]
    SchemaMismatch { topic: String, expected: usize, got: usize },
    #[error("topic {topic}: time {t} precedes previous record at {prev}")]
    TimeRegression { topic: String, t: f64, prev: f64 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("{file}: {message}")]
    Csv { file: PathBuf, message: String },
}

impl RecorderError {
    fn io(path: &Path) -> impl FnOnce(io::Error) -> RecorderError + '_ {
        move |source| RecorderError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub t: f64,
    pub fields: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub schema: Schema,
    pub records: Vec<Record>,
}

/// Run-level facts the analysis needs alongside the raw series.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BagMeta {
    /// Hex SHA-256 of the canonical scenario.
    pub fingerprint: String,
    pub step: f64,
    pub duration: f64,
    pub robots: Vec<String>,
    /// Lidar range per sensing robot; headway at or above it means "no lead".
    pub lidar_range_max: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bag {
    pub meta: BagMeta,
    topics: BTreeMap<String, Series>,
}

pub fn topic_file_name(topic: &str) -> String {
    format!("{}.csv", topic.trim_start_matches('/').replace('/', "-"))
}

impl Bag {
    pub fn new(meta: BagMeta) -> Self {
        Bag {
            meta,
            topics: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, topic: &str, schema: Schema) {
        self.topics.entry(topic.to_owned()).or_insert(Series {
            schema,
            records: Vec::new(),
        });
    }

    pub fn record_tick(&mut self, topic: &str, t: f64, fields: &[f64]) -> Result<(), RecorderError> {
        let series = self
            .topics
            .get_mut(topic)
            .ok_or_else(|| RecorderError::UnknownTopic(topic.to_owned()))?;
        let expected = series.schema.field_count();
        if fields.len() != expected {
            return Err(RecorderError::SchemaMismatch {
                topic: topic.to_owned(),
                expected,
                got: fields.len(),
            });
        }
        if let Some(last) = series.records.last() {
            if t < last.t {
                return Err(RecorderError::TimeRegression {
                    topic: topic.to_owned(),
                    t,
                    prev: last.t,
                });
            }
        }
        series.records.push(Record {
            t,
            fields: fields.to_vec(),
        });
        Ok(())
    }

    /// Topics in canonical (sorted) order.
    pub fn topics(&self) -> impl Iterator<Item = (&str, &Series)> {
        self.topics.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn series(&self, topic: &str) -> Option<&Series> {
        self.topics.get(topic)
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTopic {
    name: String,
    schema: Schema,
    file: String,
    records: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    #[serde(flatten)]
    meta: BagMeta,
    topics: Vec<ManifestTopic>,
}

/// Write the bag as a directory of per-topic CSVs plus the manifest.
/// Returns the written files, manifest last.
pub fn write_bag(bag: &Bag, out_dir: &Path) -> Result<Vec<PathBuf>, RecorderError> {
    fs::create_dir_all(out_dir).map_err(RecorderError::io(out_dir))?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for (name, series) in bag.topics() {
        let file = topic_file_name(name);
        let path = out_dir.join(&file);
        let mut w = csv::Writer::from_path(&path).map_err(|e| RecorderError::Csv {
            file: path.clone(),
            message: e.to_string(),
        })?;
        let csv_err = |e: csv::Error| RecorderError::Csv {
            file: path.clone(),
            message: e.to_string(),
        };
        let mut header = vec!["Time"];
        header.extend_from_slice(series.schema.field_names());
        w.write_record(&header).map_err(csv_err)?;
        for rec in &series.records {
            let row = std::iter::once(rec.t).chain(rec.fields.iter().copied()).map(|v| v.to_string());
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(RecorderError::io(&path))?;
        entries.push(ManifestTopic {
            name: name.to_owned(),
            schema: series.schema,
            file,
            records: series.records.len(),
        });
        written.push(path);
    }
    let manifest = Manifest {
        format: BAG_FORMAT.into(),
        version: BAG_FORMAT_VERSION,
        meta: bag.meta.clone(),
        topics: entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| RecorderError::Manifest(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(RecorderError::io(&path))?;
    written.push(path);
    Ok(written)
}

pub fn read_bag(dir: &Path) -> Result<Bag, RecorderError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(RecorderError::io(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| RecorderError::Manifest(e.to_string()))?;
    if manifest.format != BAG_FORMAT || manifest.version != BAG_FORMAT_VERSION {
        return Err(RecorderError::Manifest(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut bag = Bag::new(manifest.meta);
    for entry in manifest.topics {
        bag.register(&entry.name, entry.schema);
        let path = dir.join(&entry.file);
        let csv_err = |message: String| RecorderError::Csv {
            file: path.clone(),
            message,
        };
        let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_err(e.to_string()))?;
        let header = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
        let expected: Vec<&str> = std::iter::once("Time").chain(entry.schema.field_names().iter().copied()).collect();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(csv_err(format!("header does not match {} schema", entry.schema)));
        }
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| csv_err(e.to_string()))?;
            let nums = row
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| csv_err(format!("row {}: {e}", i + 1)))?;
            bag.record_tick(&entry.name, nums[0], &nums[1..])?;
        }
        let got = bag.series(&entry.name).map_or(0, |s| s.records.len());
        if got != entry.records {
            return Err(RecorderError::Manifest(format!(
                "{} lists {} records, file has {got}",
                entry.name, entry.records
            )));
        }
    }
    Ok(bag)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyzeOptions {
    /// Trailing fraction of the run used for the headway band.
    pub window_fraction: f64,
    pub band_center: f64,
    pub band_half_width: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            window_fraction: 0.25,
            band_center: 30.0,
            band_half_width: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadwayStats {
    pub min_gap: Option<f64>,
    /// (min, max) headway over the analysis window.
    pub band: Option<(f64, f64)>,
    /// First time after which headway stays within the settle band.
    pub settling_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum MetricWarning {
    MissingTopic { topic: String, metric: String },
}

impl std::fmt::Display for MetricWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricWarning::MissingTopic { topic, metric } => {
                write!(f, "missing topic {topic}; {metric} skipped")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub min_gap: Option<f64>,
    pub collision: bool,
    pub mean_speed: BTreeMap<String, f64>,
    pub headway: BTreeMap<String, HeadwayStats>,
    pub warnings: Vec<MetricWarning>,
}

fn headway_stats(series: &Series, range_max: Option<f64>, duration: f64, opts: &AnalyzeOptions) -> HeadwayStats {
    let valid = |h: f64| range_max.is_none_or(|r| h < r);
    let samples: Vec<(f64, f64)> = series.records.iter().map(|r| (r.t, r.fields[0])).collect();
    let min_gap = samples
        .iter()
        .filter(|(_, h)| valid(*h))
        .map(|(_, h)| *h)
        .reduce(f64::min);
    let window_start = duration * (1.0 - opts.window_fraction);
    let band = samples
        .iter()
        .filter(|(t, h)| *t >= window_start && valid(*h))
        .fold(None, |acc: Option<(f64, f64)>, (_, h)| {
            Some(acc.map_or((*h, *h), |(lo, hi)| (lo.min(*h), hi.max(*h))))
        });
    let inside = |h: f64| (h - opts.band_center).abs() <= opts.band_half_width;
    let settling_time = match samples.iter().rposition(|(_, h)| !inside(*h)) {
        None => samples.first().map(|(t, _)| *t),
        Some(i) => samples.get(i + 1).map(|(t, _)| *t),
    };
    HeadwayStats {
        min_gap,
        band,
        settling_time,
    }
}

pub fn analyze_bag(bag: &Bag, opts: &AnalyzeOptions) -> RunMetrics {
    let mut warnings = Vec::new();
    let mut mean_speed = BTreeMap::new();
    for robot in &bag.meta.robots {
        let topic = format!("/{robot}/vel");
        match bag.series(&topic) {
            Some(s) if !s.records.is_empty() => {
                let sum: f64 = s.records.iter().map(|r| r.fields[0]).sum();
                mean_speed.insert(robot.clone(), sum / s.records.len() as f64);
            }
            _ => warnings.push(MetricWarning::MissingTopic {
                topic,
                metric: format!("mean_speed[{robot}]"),
            }),
        }
    }
    let mut headway = BTreeMap::new();
    for (robot, &range_max) in &bag.meta.lidar_range_max {
        let topic = format!("/{robot}/lead_dist");
        match bag.series(&topic) {
            Some(s) => {
                headway.insert(robot.clone(), headway_stats(s, Some(range_max), bag.meta.duration, opts));
            }
            None => warnings.push(MetricWarning::MissingTopic {
                topic,
                metric: format!("headway[{robot}]"),
            }),
        }
    }
    let min_gap = headway.values().filter_map(|s| s.min_gap).reduce(f64::min);
    RunMetrics {
        min_gap,
        collision: min_gap.is_some_and(|g| g <= 0.0),
        mean_speed,
        headway,
        warnings,
    }
}

pub fn analyze(bag_dir: &Path, opts: &AnalyzeOptions) -> Result<RunMetrics, RecorderError> {
    Ok(analyze_bag(&read_bag(bag_dir)?, opts))
}
