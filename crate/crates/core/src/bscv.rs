//! Subject-level bootstrap replicates and the per-model runs against them.
//!
//! A [`ReplicateStore`] is generated once per dataset and shared by every
//! candidate model. Each replicate draws N subjects with replacement; the
//! drawn copies form the training set and the subjects never drawn (the
//! out-of-bag set) form the testing set.
//!
//! Runs write one JSON record per (model, replicate, role) and skip records
//! that already exist, so an interrupted run resumes where it stopped.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::estimate::{
    evaluate_fixed, fit_population, Drivers, EstimateError, FitOptions, FitResult, SpecModel, TestEvaluation,
};
use crate::metrics::{assemble_metric_set, eps_shrinkage_sim, MetricSet, MetricsError};
use crate::model::{ModelSpec, Theta};
use crate::seed;

pub const STORE_FILE: &str = "replicates.txt";
pub const RECORD_SCHEMA_VERSION: u32 = 1;
const STORE_MAGIC: &str = "bscv-replicate-store";
const STORE_VERSION: u32 = 1;
/// Redraws allowed per replicate before giving up on a non-empty OOB set.
const MAX_RETRIES: u64 = 10_000;

#[derive(Debug, Error)]
pub enum BscvError {
    #[error("bootstrap needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("number of replicates must be at least 1")]
    NoReplicates,
    #[error("dataset fingerprint {found} does not match the store ({expected}); the data changed since generation")]
    FingerprintMismatch { expected: String, found: String },
    #[error("no replicate store at {0}")]
    StoreMissing(PathBuf),
    #[error("malformed store, line {line}: {message}")]
    StoreFormat { line: usize, message: String },
    #[error("replicate {0} is not in the store")]
    UnknownReplicate(usize),
    #[error("could not draw a replicate with a non-empty out-of-bag set")]
    NoOutOfBag,
    #[error("model `{0}` is a PD model and needs a PK fit for its concentration input")]
    MissingDrivers(String),
    #[error("model label `{0}` cannot be used as a directory name")]
    InvalidLabel(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("thread pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, BscvError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BscvError + '_ {
    move |source| BscvError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapReplicate {
    pub index: usize,
    pub seed: u64,
    /// Number of redraws needed to get a non-empty OOB set.
    pub retry: u64,
    /// Drawn subject ids with multiplicity, in dataset order.
    pub selected: Vec<(String, usize)>,
    /// Never-drawn subject ids, in dataset order.
    pub oob: Vec<String>,
}

impl BootstrapReplicate {
    /// Bookkeeping for one draw: `draws` are positions into `ids`.
    pub fn from_draw(index: usize, seed: u64, retry: u64, ids: &[&str], draws: &[usize]) -> Self {
        let mut counts = vec![0usize; ids.len()];
        for &d in draws {
            counts[d] += 1;
        }
        let mut selected = Vec::new();
        let mut oob = Vec::new();
        for (id, &c) in ids.iter().zip(&counts) {
            if c > 0 {
                selected.push((id.to_string(), c));
            } else {
                oob.push(id.to_string());
            }
        }
        BootstrapReplicate {
            index,
            seed,
            retry,
            selected,
            oob,
        }
    }

    pub fn distinct_selected(&self) -> usize {
        self.selected.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicateStore {
    pub master_seed: u64,
    pub n_subjects: usize,
    /// Fingerprint of the dataset the replicates were drawn from.
    pub fingerprint: String,
    pub replicates: Vec<BootstrapReplicate>,
}

/// Seed of replicate `index` after `retry` redraws.
pub fn replicate_seed(master_seed: u64, index: usize, retry: u64) -> u64 {
    seed::derive(master_seed, &[index as u64, retry])
}

/// Draw `b` replicates of `dataset`.
pub fn generate_replicates(dataset: &Dataset, b: usize, master_seed: u64) -> Result<ReplicateStore> {
    let n = dataset.len();
    if n < 2 {
        return Err(BscvError::TooFewSubjects(n));
    }
    if b == 0 {
        return Err(BscvError::NoReplicates);
    }
    let ids = dataset.ids();
    let mut replicates = Vec::with_capacity(b);
    for index in 0..b {
        let rep = (0..MAX_RETRIES)
            .map(|retry| {
                let s = replicate_seed(master_seed, index, retry);
                let mut rng = seed::rng(s);
                let draws: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                BootstrapReplicate::from_draw(index, s, retry, &ids, &draws)
            })
            .find(|r| !r.oob.is_empty())
            .ok_or(BscvError::NoOutOfBag)?;
        replicates.push(rep);
    }
    Ok(ReplicateStore {
        master_seed,
        n_subjects: n,
        fingerprint: dataset.fingerprint(),
        replicates,
    })
}

impl ReplicateStore {
    pub fn b(&self) -> usize {
        self.replicates.len()
    }

    pub fn replicate(&self, index: usize) -> Result<&BootstrapReplicate> {
        self.replicates.get(index).ok_or(BscvError::UnknownReplicate(index))
    }

    /// Versioned text form: a header, then one JSON line per replicate.
    pub fn to_text(&self) -> String {
        let mut out = format!("{STORE_MAGIC} {STORE_VERSION}\n");
        out.push_str("# seed(index, retry) = derive(master_seed, [index, retry])\n");
        out.push_str("# derive(m, parts) = fold over parts of splitmix64(acc ^ splitmix64(p)), acc0 = splitmix64(m)\n");
        out.push_str(&format!("b {}\n", self.b()));
        out.push_str(&format!("master_seed {}\n", self.master_seed));
        out.push_str(&format!("n_subjects {}\n", self.n_subjects));
        out.push_str(&format!("fingerprint {}\n", self.fingerprint));
        for r in &self.replicates {
            out.push_str(&serde_json::to_string(r).expect("replicates serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| BscvError::StoreFormat { line, message };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        match first.split_once(' ') {
            Some((STORE_MAGIC, v)) if v.trim() == STORE_VERSION.to_string() => {}
            _ => return Err(bad(1, format!("expected `{STORE_MAGIC} {STORE_VERSION}`"))),
        }
        let mut header = BTreeMap::new();
        for key in ["b", "master_seed", "n_subjects", "fingerprint"] {
            let (i, line) = lines.next().ok_or_else(|| bad(0, format!("missing `{key}`")))?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => header.insert(key, v.trim().to_string()),
                _ => return Err(bad(i + 1, format!("expected `{key}`"))),
            };
        }
        let num = |key: &str| -> Result<u64> {
            header[key]
                .parse()
                .map_err(|_| bad(0, format!("`{key}` is not an integer")))
        };
        let b = num("b")? as usize;
        let mut replicates = Vec::with_capacity(b);
        for (i, line) in lines {
            let r: BootstrapReplicate = serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))?;
            if r.index != replicates.len() {
                return Err(bad(i + 1, format!("replicate {} out of order", r.index)));
            }
            replicates.push(r);
        }
        if replicates.len() != b {
            return Err(bad(
                0,
                format!("header says {b} replicates, found {}", replicates.len()),
            ));
        }
        Ok(ReplicateStore {
            master_seed: num("master_seed")?,
            n_subjects: num("n_subjects")? as usize,
            fingerprint: header["fingerprint"].clone(),
            replicates,
        })
    }

    /// SHA-256 of the text form; identifies the store in run records.
    pub fn id(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    /// Write `<dir>/replicates.txt`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(STORE_FILE);
        write_atomic(&path, self.to_text().as_bytes())?;
        Ok(path)
    }

    /// Read a store from a directory holding `replicates.txt`, or from the file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(STORE_FILE)
        } else {
            path.to_path_buf()
        };
        if !file.is_file() {
            return Err(BscvError::StoreMissing(file));
        }
        let text = fs::read_to_string(&file).map_err(io_err(&file))?;
        Self::from_text(&text)
    }

    pub fn check_fingerprint(&self, dataset: &Dataset) -> Result<()> {
        let found = dataset.fingerprint();
        if found != self.fingerprint {
            return Err(BscvError::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Training and testing datasets of replicate `index`. Training copies are
/// renamed `<id>#<k>` so repeated subjects count as separate individuals.
pub fn materialize(store: &ReplicateStore, index: usize, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
    store.check_fingerprint(dataset)?;
    let rep = store.replicate(index)?;
    let lookup = |id: &str| {
        dataset.subject(id).ok_or_else(|| BscvError::StoreFormat {
            line: 0,
            message: format!("subject `{id}` is not in the dataset"),
        })
    };
    let mut training = Vec::with_capacity(store.n_subjects);
    for (id, count) in &rep.selected {
        let s = lookup(id)?;
        training.extend((1..=*count).map(|k| s.relabeled(format!("{id}#{k}"))));
    }
    let testing = rep
        .oob
        .iter()
        .map(|id| lookup(id).cloned())
        .collect::<Result<Vec<_>>>()?;
    let name = |role: &str| format!("{}:replicate={index}:{role}", dataset.provenance);
    Ok((
        Dataset::new(training, name("training"))?,
        Dataset::new(testing, name("testing"))?,
    ))
}

/// Mean fraction of distinct subjects drawn per replicate.
pub fn inclusion_fraction(store: &ReplicateStore) -> f64 {
    let n = store.n_subjects as f64;
    let total: f64 = store.replicates.iter().map(|r| r.distinct_selected() as f64 / n).sum();
    total / store.b() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Original,
    Training,
    Testing,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Original => "original",
            Role::Training => "training",
            Role::Testing => "testing",
        }
    }
}

/// Outcome of one (model, replicate, role).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub model: String,
    pub role: Role,
    /// `None` for the original data.
    pub replicate: Option<usize>,
    pub store_id: String,
    pub b: usize,
    /// Subject ids of the dataset this record describes.
    pub subjects: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<MetricSet>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(default)]
    pub failed_subjects: Vec<(String, String)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fit: Option<FitResult<Theta>>,
    /// The model itself, on original-data records, so that a PK record can
    /// drive a sequential PD run on its own.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spec: Option<ModelSpec>,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| BscvError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|source| BscvError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

/// `<out>/<label>/original.json` or `<out>/<label>/rep<index>.<role>.json`.
pub fn record_path(out: &Path, label: &str, role: Role, replicate: Option<usize>) -> PathBuf {
    let dir = out.join(label);
    match replicate {
        None => dir.join(format!("{}.json", role.name())),
        Some(i) => dir.join(format!("rep{i:05}.{}.json", role.name())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub fit: FitOptions,
    /// Conditional draws per subject for simulated ε-shrinkage; 0 skips it.
    pub eps_sim_draws: usize,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// Reuse records already on disk.
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            fit: FitOptions::default(),
            eps_sim_draws: 20,
            jobs: 0,
            resume: true,
        }
    }
}

fn valid_label(label: &str) -> bool {
    !label.is_empty()
        && label != "."
        && label != ".."
        && label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

struct Runner<'a> {
    spec: &'a ModelSpec,
    model: SpecModel<'a>,
    store: &'a ReplicateStore,
    store_id: String,
    options: &'a RunOptions,
}

impl Runner<'_> {
    fn record(&self, role: Role, replicate: Option<usize>, data: &Dataset) -> RunRecord {
        RunRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            model: self.spec.label.clone(),
            role,
            replicate,
            store_id: self.store_id.clone(),
            b: self.store.b(),
            subjects: data.ids().into_iter().map(String::from).collect(),
            metrics: None,
            error: None,
            failed_subjects: Vec::new(),
            fit: None,
            spec: None,
        }
    }

    fn metrics(&self, theta: &Theta, data: &Dataset, eval: &TestEvaluation, seed: u64) -> Result<MetricSet> {
        let eps_sim = match self.options.eps_sim_draws {
            0 => None,
            n => eps_shrinkage_sim(&self.model, theta, data, n, seed, &self.options.fit.inner()).ok(),
        };
        Ok(assemble_metric_set(eval, self.model.spec.p_count(), eps_sim)?)
    }

    /// Fit on `data`, then describe it with its own fit.
    fn fit_and_describe(&self, data: &Dataset, fit_seed: u64, rec: &mut RunRecord) -> Result<FitResult<Theta>> {
        let opts = FitOptions {
            seed: fit_seed,
            ..self.options.fit.clone()
        };
        let fit = fit_population(&self.model, data, &opts)?;
        let eval = evaluate_fixed(&self.model, &fit.theta_hat, data, &opts)?;
        rec.metrics = Some(self.metrics(&fit.theta_hat, data, &eval, seed::derive(fit_seed, &[1]))?);
        rec.failed_subjects = eval.failed_subjects;
        rec.fit = Some(fit.clone());
        Ok(fit)
    }

    fn original(&self, data: &Dataset) -> RunRecord {
        let mut rec = self.record(Role::Original, None, data);
        rec.spec = Some(self.spec.clone());
        if let Err(e) = self.fit_and_describe(data, self.options.fit.seed, &mut rec) {
            rec.error = Some(e.to_string());
        }
        rec
    }

    fn replicate(&self, index: usize, data: &Dataset) -> Result<[RunRecord; 2]> {
        let (training, testing) = materialize(self.store, index, data)?;
        let rep_seed = self.store.replicates[index].seed;
        let mut train = self.record(Role::Training, Some(index), &training);
        let mut test = self.record(Role::Testing, Some(index), &testing);
        match self.fit_and_describe(&training, rep_seed, &mut train) {
            Ok(fit) => {
                let opts = FitOptions {
                    seed: rep_seed,
                    ..self.options.fit.clone()
                };
                let tested = evaluate_fixed(&self.model, &fit.theta_hat, &testing, &opts)
                    .map_err(BscvError::from)
                    .and_then(|eval| {
                        let m = self.metrics(&fit.theta_hat, &testing, &eval, seed::derive(rep_seed, &[2]))?;
                        Ok((m, eval.failed_subjects))
                    });
                match tested {
                    Ok((m, failed)) => {
                        test.metrics = Some(m);
                        test.failed_subjects = failed;
                    }
                    Err(e) => test.error = Some(e.to_string()),
                }
            }
            Err(e) => {
                train.error = Some(e.to_string());
                test.error = Some(format!("no training fit: {e}"));
            }
        }
        Ok([train, test])
    }
}

fn reusable(path: &Path, label: &str, store_id: &str) -> Option<RunRecord> {
    let rec = RunRecord::load(path).ok()?;
    (rec.schema_version == RECORD_SCHEMA_VERSION && rec.model == label && rec.store_id == store_id).then_some(rec)
}

/// Fit and evaluate `spec` on the original data and on every replicate of
/// `store`, writing records under `out`. PD specs need `drivers`.
/// Returns every record: original first, then training/testing pairs by index.
pub fn run_model(
    spec: &ModelSpec,
    store: &ReplicateStore,
    dataset: &Dataset,
    drivers: Option<&Drivers>,
    options: &RunOptions,
    out: &Path,
) -> Result<Vec<RunRecord>> {
    store.check_fingerprint(dataset)?;
    options.fit.validate()?;
    if !valid_label(&spec.label) {
        return Err(BscvError::InvalidLabel(spec.label.clone()));
    }
    let model = match (spec.structural.is_pk(), drivers) {
        (true, _) => SpecModel::new(spec),
        (false, Some(d)) => SpecModel::with_drivers(spec, d),
        (false, None) => return Err(BscvError::MissingDrivers(spec.label.clone())),
    };
    let dir = out.join(&spec.label);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let runner = Runner {
        spec,
        model,
        store,
        store_id: store.id(),
        options,
    };
    let label = spec.label.as_str();
    let store_id = runner.store_id.as_str();

    let work = || -> Result<Vec<RunRecord>> {
        let items: Vec<Option<usize>> = std::iter::once(None).chain((0..store.b()).map(Some)).collect();
        let results: Vec<Result<Vec<RunRecord>>> = items
            .into_par_iter()
            .map(|item| match item {
                None => {
                    let path = record_path(out, label, Role::Original, None);
                    if let Some(r) = options.resume.then(|| reusable(&path, label, store_id)).flatten() {
                        return Ok(vec![r]);
                    }
                    let rec = runner.original(dataset);
                    rec.save(&path)?;
                    Ok(vec![rec])
                }
                Some(i) => {
                    let paths = [Role::Training, Role::Testing].map(|r| record_path(out, label, r, Some(i)));
                    if options.resume {
                        if let [Some(a), Some(b)] = paths.clone().map(|p| reusable(&p, label, store_id)) {
                            return Ok(vec![a, b]);
                        }
                    }
                    let recs = runner.replicate(i, dataset)?;
                    for (rec, path) in recs.iter().zip(&paths) {
                        rec.save(path)?;
                    }
                    Ok(recs.into())
                }
            })
            .collect();
        let mut all = Vec::with_capacity(2 * store.b() + 1);
        for r in results {
            all.extend(r?);
        }
        Ok(all)
    };

    if options.jobs == 0 {
        work()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.jobs)
            .build()
            .map_err(|e| BscvError::Pool(e.to_string()))?
            .install(work)
    }
}
