//! Aggregation of run records into per-model ensembles, ranking by
//! testing-set medians, and the report files.
//!
//! Outputs are deterministic: maps are ordered, floats use the shortest
//! round-trip representation, and nothing time-dependent is written.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bscv::{BscvError, Role, RunRecord};
use crate::metrics::{median, Statistic};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const JSON_FILE: &str = "report.json";
pub const LONG_CSV_FILE: &str = "metrics_long.csv";
pub const PLOT_CSV_FILE: &str = "plot_summary.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("records come from different replicate stores: {0} and {1}")]
    MixedStores(String, String),
    #[error("statistic `{0}` is not in every ensemble")]
    UnknownStatistic(Statistic),
    #[error("duplicate record for model `{model}`, {role} replicate {replicate:?}")]
    DuplicateRecord {
        model: String,
        role: &'static str,
        replicate: Option<usize>,
    },
    #[error("no run records found in {0}")]
    NoRecords(PathBuf),
    #[error("invalid report configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Record(#[from] BscvError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ReportError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerBetter,
    HigherBetter,
    /// Ranked by absolute value.
    NearZeroBetter,
}

pub fn direction(stat: Statistic) -> Direction {
    match stat {
        Statistic::Smpq => Direction::HigherBetter,
        Statistic::EpsShrinkEbe | Statistic::EpsShrinkSim => Direction::NearZeroBetter,
        _ => Direction::LowerBetter,
    }
}

/// One statistic of one model across roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatEnsemble {
    pub original: Option<f64>,
    /// (replicate index, value), failed replicates excluded.
    pub training: Vec<(usize, f64)>,
    pub testing: Vec<(usize, f64)>,
    pub training_median: Option<f64>,
    pub testing_median: Option<f64>,
    pub training_failures: usize,
    pub testing_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEnsemble {
    pub model: String,
    pub store_id: String,
    pub b: usize,
    pub stats: BTreeMap<Statistic, StatEnsemble>,
}

fn values(v: &[(usize, f64)]) -> Vec<f64> {
    v.iter().map(|p| p.1).collect()
}

/// Group records by model and collect each statistic per role. Replicates
/// without a usable value (failed, missing, or non-finite) count as failures.
pub fn aggregate(records: &[RunRecord], statistics: &[Statistic]) -> Result<Vec<MetricEnsemble>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let mut by_model: BTreeMap<&str, BTreeMap<(Role, Option<usize>), &RunRecord>> = BTreeMap::new();
    for r in records {
        if r.store_id != first.store_id || r.b != first.b {
            return Err(ReportError::MixedStores(first.store_id.clone(), r.store_id.clone()));
        }
        let slot = by_model.entry(&r.model).or_default();
        if slot.insert((r.role, r.replicate), r).is_some() {
            return Err(ReportError::DuplicateRecord {
                model: r.model.clone(),
                role: r.role.name(),
                replicate: r.replicate,
            });
        }
    }
    let b = first.b;
    let mut out = Vec::with_capacity(by_model.len());
    for (model, recs) in by_model {
        let mut stats = BTreeMap::new();
        for &stat in statistics {
            let value = |r: &RunRecord| r.metrics.as_ref().and_then(|m| m.get(stat));
            let role_values = |role| -> Vec<(usize, f64)> {
                (0..b)
                    .filter_map(|i| recs.get(&(role, Some(i))).and_then(|r| value(r)).map(|v| (i, v)))
                    .collect()
            };
            let training = role_values(Role::Training);
            let testing = role_values(Role::Testing);
            stats.insert(
                stat,
                StatEnsemble {
                    original: recs.get(&(Role::Original, None)).and_then(|r| value(r)),
                    training_median: median(&values(&training)),
                    testing_median: median(&values(&testing)),
                    training_failures: b - training.len(),
                    testing_failures: b - testing.len(),
                    training,
                    testing,
                },
            );
        }
        out.push(MetricEnsemble {
            model: model.to_string(),
            store_id: first.store_id.clone(),
            b,
            stats,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub model: String,
    pub testing_median: Option<f64>,
    pub training_median: Option<f64>,
    pub original: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub statistic: Statistic,
    pub direction: Direction,
    /// Best first.
    pub entries: Vec<RankEntry>,
}

/// Order models by testing median in the statistic's direction; models
/// without a testing median go last, ties go to the smaller label.
pub fn rank_models(ensembles: &[MetricEnsemble], stat: Statistic) -> Result<Ranking> {
    let dir = direction(stat);
    let mut entries = ensembles
        .iter()
        .map(|e| {
            let s = e.stats.get(&stat).ok_or(ReportError::UnknownStatistic(stat))?;
            Ok(RankEntry {
                model: e.model.clone(),
                testing_median: s.testing_median,
                training_median: s.training_median,
                original: s.original,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let key = |m: f64| match dir {
        Direction::LowerBetter => m,
        Direction::HigherBetter => -m,
        Direction::NearZeroBetter => m.abs(),
    };
    entries.sort_by(|a, b| {
        let order = match (a.testing_median, b.testing_median) {
            (Some(x), Some(y)) => key(x).total_cmp(&key(y)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        };
        order.then_with(|| a.model.cmp(&b.model))
    });
    Ok(Ranking {
        statistic: stat,
        direction: dir,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Json,
    LongCsv,
    PlotCsv,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "long-csv" | "long_csv" => Ok(Format::LongCsv),
            "plot-csv" | "plot_csv" => Ok(Format::PlotCsv),
            _ => Err(format!("unknown format `{s}` (json, long-csv, plot-csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportConfig {
    pub statistics: Vec<Statistic>,
    pub out_dir: PathBuf,
    pub formats: Vec<Format>,
}

impl ReportConfig {
    /// Every statistic in every format.
    pub fn all(out_dir: impl Into<PathBuf>) -> Self {
        ReportConfig {
            statistics: Statistic::ALL.to_vec(),
            out_dir: out_dir.into(),
            formats: vec![Format::Json, Format::LongCsv, Format::PlotCsv],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.statistics.is_empty() {
            return Err(ReportError::InvalidConfig("no statistics selected".into()));
        }
        if self.formats.is_empty() {
            return Err(ReportError::InvalidConfig("no output formats selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct StatSummary {
    original: Option<f64>,
    training_median: Option<f64>,
    testing_median: Option<f64>,
    n_training: usize,
    n_testing: usize,
    training_failures: usize,
    testing_failures: usize,
}

#[derive(Debug, Serialize)]
struct JsonReport<'a> {
    schema_version: u32,
    store_id: &'a str,
    b: usize,
    statistics: &'a [Statistic],
    models: BTreeMap<&'a str, BTreeMap<Statistic, StatSummary>>,
    rankings: &'a [Ranking],
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn json_report(ensembles: &[MetricEnsemble], rankings: &[Ranking], statistics: &[Statistic]) -> Result<String> {
    let mut models = BTreeMap::new();
    for e in ensembles {
        let mut per = BTreeMap::new();
        for stat in statistics {
            let s = e.stats.get(stat).ok_or(ReportError::UnknownStatistic(*stat))?;
            per.insert(
                *stat,
                StatSummary {
                    original: s.original,
                    training_median: s.training_median,
                    testing_median: s.testing_median,
                    n_training: s.training.len(),
                    n_testing: s.testing.len(),
                    training_failures: s.training_failures,
                    testing_failures: s.testing_failures,
                },
            );
        }
        models.insert(e.model.as_str(), per);
    }
    let report = JsonReport {
        schema_version: REPORT_SCHEMA_VERSION,
        store_id: ensembles.first().map(|e| e.store_id.as_str()).unwrap_or(""),
        b: ensembles.first().map(|e| e.b).unwrap_or(0),
        statistics,
        models,
        rankings,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    Ok(text)
}

/// `model,statistic,role,replicate,value`, one row per scalar.
pub fn long_csv(ensembles: &[MetricEnsemble], statistics: &[Statistic]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "statistic", "role", "replicate", "value"])?;
    for e in ensembles {
        for stat in statistics {
            let s = e.stats.get(stat).ok_or(ReportError::UnknownStatistic(*stat))?;
            if let Some(v) = s.original {
                w.write_record([e.model.as_str(), stat.name(), "original", "", &v.to_string()])?;
            }
            for (role, vals) in [("training", &s.training), ("testing", &s.testing)] {
                for (i, v) in vals {
                    w.write_record([e.model.as_str(), stat.name(), role, &i.to_string(), &v.to_string()])?;
                }
            }
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv output is utf-8"))
}

/// One row per (model, statistic) with the three panel values.
pub fn plot_csv(ensembles: &[MetricEnsemble], statistics: &[Statistic]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model",
        "statistic",
        "original",
        "training_median",
        "testing_median",
        "n_training",
        "n_testing",
    ])?;
    for e in ensembles {
        for stat in statistics {
            let s = e.stats.get(stat).ok_or(ReportError::UnknownStatistic(*stat))?;
            w.write_record([
                e.model.clone(),
                stat.name().to_string(),
                num(s.original),
                num(s.training_median),
                num(s.testing_median),
                s.training.len().to_string(),
                s.testing.len().to_string(),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("csv output is utf-8"))
}

/// Write the configured files; returns their paths.
pub fn emit_outputs(ensembles: &[MetricEnsemble], rankings: &[Ranking], config: &ReportConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let dir = &config.out_dir;
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut formats = config.formats.clone();
    formats.sort();
    formats.dedup();
    let mut written = Vec::new();
    for f in formats {
        let (name, text) = match f {
            Format::Json => (JSON_FILE, json_report(ensembles, rankings, &config.statistics)?),
            Format::LongCsv => (LONG_CSV_FILE, long_csv(ensembles, &config.statistics)?),
            Format::PlotCsv => (PLOT_CSV_FILE, plot_csv(ensembles, &config.statistics)?),
        };
        let path = dir.join(name);
        fs::write(&path, text).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

/// Every record under `dir/<model>/`, in path order.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    let mut paths = Vec::new();
    for model_dir in fs::read_dir(dir).map_err(io_err(dir))? {
        let model_dir = model_dir.map_err(io_err(dir))?.path();
        if !model_dir.is_dir() {
            continue;
        }
        for f in fs::read_dir(&model_dir).map_err(io_err(&model_dir))? {
            let p = f.map_err(io_err(&model_dir))?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.ends_with(".json") && (name == "original.json" || name.starts_with("rep")) {
                paths.push(p);
            }
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(ReportError::NoRecords(dir.to_path_buf()));
    }
    paths
        .iter()
        .map(|p| RunRecord::load(p).map_err(ReportError::from))
        .collect()
}

/// Load, aggregate, rank every configured statistic, and write the outputs.
pub fn report_directory(results: &Path, config: &ReportConfig) -> Result<(Vec<MetricEnsemble>, Vec<Ranking>)> {
    config.validate()?;
    let records = load_records(results)?;
    let ensembles = aggregate(&records, &config.statistics)?;
    let rankings = config
        .statistics
        .iter()
        .map(|&s| rank_models(&ensembles, s))
        .collect::<Result<Vec<_>>>()?;
    emit_outputs(&ensembles, &rankings, config)?;
    Ok((ensembles, rankings))
}
