//! Longitudinal dose/observation data with subject covariates.
//!
//! The on-disk layout is a flat CSV with one row per event:
//!
//! ```text
//! ID,TIME,AMT,DV,DVID,WT,AGE,SEX
//! 1,0,100,.,.,66.7,50,M
//! 1,0.5,.,0.0,1,66.7,50,M
//! ```
//!
//! Headers are matched case-insensitively and `.` marks a missing field.
//! Rows with `AMT` become dose events, rows with `DV` become observations on
//! the channel named by `DVID` (1 = concentration, 2 = response). Covariates
//! are taken from the first row of each subject.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MISSING: &str = ".";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("required column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` is not numeric: `{value}`")]
    NonNumericField { row: usize, column: String, value: String },
    #[error("row {row}: unknown observation channel `{value}` (expected 1 or 2)")]
    UnknownChannel { row: usize, value: String },
    #[error("row {row}: invalid value in column `{column}`: {reason}")]
    InvalidValue { row: usize, column: String, reason: String },
    #[error("dataset contains no subjects")]
    EmptyDataset,
    #[error("duplicate subject id `{0}`")]
    DuplicateSubject(String),
    #[error("covariate transform requires positive inputs, got value={value}, reference={reference}")]
    NonPositiveInput { value: f64, reference: f64 },
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for DatasetError {
    fn from(e: csv::Error) -> Self {
        DatasetError::Csv(e.to_string())
    }
}

/// Observation channel: `Y1` is concentration, `Y2` is the PD response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "pk")]
    Y1Pk,
    #[serde(rename = "pd")]
    Y2Pd,
}

impl Channel {
    pub fn dvid(self) -> u8 {
        match self {
            Channel::Y1Pk => 1,
            Channel::Y2Pd => 2,
        }
    }

    pub fn from_dvid(v: f64) -> Option<Channel> {
        if v == 1.0 {
            Some(Channel::Y1Pk)
        } else if v == 2.0 {
            Some(Channel::Y2Pd)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseEvent {
    /// Hours.
    pub time: f64,
    /// Milligrams.
    pub amount: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub value: f64,
    pub channel: Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
    #[default]
    Unknown,
}

impl Sex {
    fn parse(s: &str) -> Sex {
        match s.trim().to_ascii_uppercase().as_str() {
            "M" | "MALE" | "1" => Sex::M,
            "F" | "FEMALE" | "0" => Sex::F,
            _ => Sex::Unknown,
        }
    }

    fn as_field(self) -> &'static str {
        match self {
            Sex::M => "M",
            Sex::F => "F",
            Sex::Unknown => MISSING,
        }
    }
}

/// Subject-level covariates. Sex is carried as metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Covariates {
    pub weight: Option<f64>,
    pub age: Option<f64>,
    pub sex: Sex,
}

/// Continuous covariates usable in parameter models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Weight,
    Age,
}

impl Covariates {
    pub fn get(&self, kind: CovariateKind) -> Option<f64> {
        match kind {
            CovariateKind::Weight => self.weight,
            CovariateKind::Age => self.age,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// Id of the subject this record was copied from. Equal to `id` for
    /// subjects read from disk; bootstrap copies keep the source id here.
    pub origin: String,
    pub doses: Vec<DoseEvent>,
    /// Sorted by time (stable), hence sorted within each channel.
    pub observations: Vec<Observation>,
    pub covariates: Covariates,
}

impl Subject {
    pub fn new(
        id: impl Into<String>,
        mut doses: Vec<DoseEvent>,
        mut observations: Vec<Observation>,
        covariates: Covariates,
    ) -> Self {
        let id = id.into();
        doses.sort_by(|a, b| a.time.total_cmp(&b.time));
        observations.sort_by(|a, b| a.time.total_cmp(&b.time));
        Subject {
            origin: id.clone(),
            id,
            doses,
            observations,
            covariates,
        }
    }

    pub fn channel_observations(&self, channel: Channel) -> impl Iterator<Item = &Observation> {
        self.observations.iter().filter(move |o| o.channel == channel)
    }

    pub fn channel_times(&self, channel: Channel) -> Vec<f64> {
        self.channel_observations(channel).map(|o| o.time).collect()
    }

    pub fn channel_values(&self, channel: Channel) -> Vec<f64> {
        self.channel_observations(channel).map(|o| o.value).collect()
    }

    pub fn n_obs(&self, channel: Channel) -> usize {
        self.channel_observations(channel).count()
    }

    /// Copy of this subject under a new id, remembering where it came from.
    pub fn relabeled(&self, id: impl Into<String>) -> Subject {
        Subject {
            id: id.into(),
            origin: self.origin.clone(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    subjects: Vec<Subject>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(subjects: Vec<Subject>, provenance: impl Into<String>) -> Result<Self, DatasetError> {
        if subjects.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        let mut seen = HashSet::new();
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(DatasetError::DuplicateSubject(s.id.clone()));
            }
        }
        Ok(Dataset {
            subjects,
            provenance: provenance.into(),
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.subjects.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn n_obs(&self, channel: Channel) -> usize {
        self.subjects.iter().map(|s| s.n_obs(channel)).sum()
    }

    /// Concatenate two datasets; ids must stay distinct.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset, DatasetError> {
        let mut subjects = self.subjects.clone();
        subjects.extend(other.subjects.iter().cloned());
        Dataset::new(subjects, self.provenance.clone())
    }

    /// Serialize back to the canonical CSV layout.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ID,TIME,AMT,DV,DVID,WT,AGE,SEX\n");
        for s in &self.subjects {
            let wt = fmt_opt(s.covariates.weight);
            let age = fmt_opt(s.covariates.age);
            let sex = s.covariates.sex.as_field();
            // Doses precede observations at equal times.
            let mut rows: Vec<(f64, u8, String)> = Vec::new();
            for d in &s.doses {
                rows.push((d.time, 0, format!("{},{},{},.,.", s.id, d.time, d.amount)));
            }
            for o in &s.observations {
                rows.push((
                    o.time,
                    1,
                    format!("{},{},.,{},{}", s.id, o.time, o.value, o.channel.dvid()),
                ));
            }
            rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (_, _, r) in rows {
                out.push_str(&r);
                out.push_str(&format!(",{wt},{age},{sex}\n"));
            }
        }
        out
    }

    /// SHA-256 of the canonical CSV serialization, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_csv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| MISSING.to_string())
}

/// Column names used to locate each field. Matching is case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub id: String,
    pub time: String,
    pub amt: String,
    pub dv: String,
    pub dvid: String,
    pub weight: String,
    pub age: String,
    pub sex: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id: "ID".into(),
            time: "TIME".into(),
            amt: "AMT".into(),
            dv: "DV".into(),
            dvid: "DVID".into(),
            weight: "WT".into(),
            age: "AGE".into(),
            sex: "SEX".into(),
        }
    }
}

struct Columns {
    id: usize,
    time: usize,
    amt: usize,
    dv: usize,
    dvid: usize,
    weight: Option<usize>,
    age: Option<usize>,
    sex: Option<usize>,
}

impl Columns {
    fn resolve(header: &csv::StringRecord, schema: &CsvSchema) -> Result<Self, DatasetError> {
        let lookup: HashMap<String, usize> = header
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_ascii_lowercase(), i))
            .collect();
        let find = |name: &str| lookup.get(&name.to_ascii_lowercase()).copied();
        let required = |name: &str| find(name).ok_or_else(|| DatasetError::MissingColumn(name.to_string()));
        Ok(Columns {
            id: required(&schema.id)?,
            time: required(&schema.time)?,
            amt: required(&schema.amt)?,
            dv: required(&schema.dv)?,
            dvid: required(&schema.dvid)?,
            weight: find(&schema.weight),
            age: find(&schema.age),
            sex: find(&schema.sex),
        })
    }
}

fn field(rec: &csv::StringRecord, idx: usize) -> Option<&str> {
    let v = rec.get(idx)?.trim();
    if v.is_empty() || v == MISSING {
        None
    } else {
        Some(v)
    }
}

fn numeric(rec: &csv::StringRecord, idx: usize, row: usize, column: &str) -> Result<Option<f64>, DatasetError> {
    match field(rec, idx) {
        None => Ok(None),
        Some(v) => match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(Some(x)),
            _ => Err(DatasetError::NonNumericField {
                row,
                column: column.to_string(),
                value: v.to_string(),
            }),
        },
    }
}

fn positive(v: Option<f64>, row: usize, column: &str) -> Result<Option<f64>, DatasetError> {
    match v {
        Some(x) if x <= 0.0 => Err(DatasetError::InvalidValue {
            row,
            column: column.to_string(),
            reason: format!("expected a positive value, got {x}"),
        }),
        other => Ok(other),
    }
}

struct SubjectBuilder {
    doses: Vec<DoseEvent>,
    observations: Vec<Observation>,
    covariates: Covariates,
}

/// Parse CSV text into a [`Dataset`]. Row numbers in errors are 1-based and
/// count the header as row 1.
pub fn parse_dataset(text: &str, schema: &CsvSchema) -> Result<Dataset, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let cols = Columns::resolve(&header, schema)?;

    let mut order: Vec<String> = Vec::new();
    let mut builders: BTreeMap<String, SubjectBuilder> = BTreeMap::new();

    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let id = field(&rec, cols.id)
            .ok_or_else(|| DatasetError::InvalidValue {
                row,
                column: schema.id.clone(),
                reason: "missing subject id".into(),
            })?
            .to_string();
        let time = numeric(&rec, cols.time, row, &schema.time)?.ok_or_else(|| DatasetError::InvalidValue {
            row,
            column: schema.time.clone(),
            reason: "missing time".into(),
        })?;
        if time < 0.0 {
            return Err(DatasetError::InvalidValue {
                row,
                column: schema.time.clone(),
                reason: format!("negative time {time}"),
            });
        }
        let amt = positive(numeric(&rec, cols.amt, row, &schema.amt)?, row, &schema.amt)?;
        let dv = numeric(&rec, cols.dv, row, &schema.dv)?;

        let builder = builders.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            SubjectBuilder {
                doses: Vec::new(),
                observations: Vec::new(),
                covariates: Covariates::default(),
            }
        });
        if builder.doses.is_empty() && builder.observations.is_empty() {
            let weight = match cols.weight {
                Some(c) => positive(numeric(&rec, c, row, &schema.weight)?, row, &schema.weight)?,
                None => None,
            };
            let age = match cols.age {
                Some(c) => positive(numeric(&rec, c, row, &schema.age)?, row, &schema.age)?,
                None => None,
            };
            let sex = cols
                .sex
                .and_then(|c| field(&rec, c))
                .map(Sex::parse)
                .unwrap_or_default();
            builder.covariates = Covariates { weight, age, sex };
        }

        if let Some(amount) = amt {
            builder.doses.push(DoseEvent { time, amount });
        }
        if let Some(value) = dv {
            let raw = field(&rec, cols.dvid).ok_or_else(|| DatasetError::InvalidValue {
                row,
                column: schema.dvid.clone(),
                reason: "observation row without channel".into(),
            })?;
            let channel =
                raw.parse::<f64>()
                    .ok()
                    .and_then(Channel::from_dvid)
                    .ok_or_else(|| DatasetError::UnknownChannel {
                        row,
                        value: raw.to_string(),
                    })?;
            builder.observations.push(Observation { time, value, channel });
        }
    }

    let subjects = order
        .into_iter()
        .map(|id| {
            let b = builders.remove(&id).expect("builder registered with id");
            Subject::new(id, b.doses, b.observations, b.covariates)
        })
        .collect();
    Dataset::new(subjects, "csv")
}

/// Natural log of `value / reference`, e.g. `LnWt70 = ln(wt / 70)`.
pub fn transform_covariate(value: f64, reference: f64) -> Result<f64, DatasetError> {
    if !(value > 0.0 && reference > 0.0) || !value.is_finite() || !reference.is_finite() {
        return Err(DatasetError::NonPositiveInput { value, reference });
    }
    Ok((value / reference).ln())
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::Y1Pk => write!(f, "pk"),
            Channel::Y2Pd => write!(f, "pd"),
        }
    }
}
