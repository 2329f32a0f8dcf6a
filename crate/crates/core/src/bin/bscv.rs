//! Command-line entry point: generate a replicate store, run models against
//! it, report rankings, or simulate a synthetic dataset.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use bscv::bscv::{generate_replicates, inclusion_fraction, run_model, ReplicateStore, RunOptions, RunRecord};
use bscv::dataset::{parse_dataset, CsvSchema, Dataset};
use bscv::estimate::{sequential_pd_prepare, FitOptions, LlMode};
use bscv::metrics::Statistic;
use bscv::model::ModelSpec;
use bscv::report::{report_directory, Format, ReportConfig};
use bscv::simulate::{simulate_pk, simulate_pkpd, SimulationDesign};

#[derive(Parser)]
#[command(
    name = "bscv",
    version,
    about = "Bootstrap cross-validation for population PK/PD models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Laplace,
    Is,
}

#[derive(Subcommand)]
enum Command {
    /// Draw bootstrap replicates of a dataset and save them.
    Generate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "B", short = 'B', default_value_t = 100)]
        b: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit every model on the original data and on each replicate.
    Run {
        /// A model TOML file or a directory of them.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "laplace")]
        ll_mode: Mode,
        #[arg(long, default_value_t = 1000)]
        is_samples: usize,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Original-data record of a PK model; required for PD models.
        #[arg(long)]
        pk_fit: Option<PathBuf>,
        /// Conditional draws per subject for simulated ε-shrinkage (0 skips).
        #[arg(long, default_value_t = 20)]
        eps_sim_draws: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-7)]
        outer_tolerance: f64,
        #[arg(long, default_value_t = 4000)]
        max_iters: usize,
        /// Recompute records that already exist.
        #[arg(long)]
        no_resume: bool,
    },
    /// Aggregate run records, rank models, and write report files.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Comma-separated statistics; all by default.
        #[arg(long, value_delimiter = ',')]
        stats: Vec<Statistic>,
        #[arg(long, value_delimiter = ',', default_value = "json,long-csv,plot-csv")]
        formats: Vec<Format>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a dataset from a model's configured values.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// PK model driving a PD `--model`.
        #[arg(long)]
        pk_model: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        n_subjects: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_dataset(&text, &CsvSchema::default()).with_context(|| format!("parsing {}", path.display()))
}

fn model_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no model files in {}", path.display());
    }
    Ok(files)
}

fn load_spec(path: &Path) -> Result<ModelSpec> {
    ModelSpec::from_toml_file(path).with_context(|| format!("loading {}", path.display()))
}

fn generate(data: &Path, b: usize, seed: u64, out: &Path) -> Result<()> {
    let dataset = read_dataset(data)?;
    let store = generate_replicates(&dataset, b, seed)?;
    let path = store.save(out)?;
    println!(
        "wrote {} replicates of {} subjects to {} (mean inclusion fraction {:.4})",
        store.b(),
        store.n_subjects,
        path.display(),
        inclusion_fraction(&store)
    );
    Ok(())
}

fn run(models: &Path, store: &Path, data: &Path, options: RunOptions, pk_fit: Option<&Path>, out: &Path) -> Result<()> {
    let dataset = read_dataset(data)?;
    let store = ReplicateStore::load(store)?;
    store.check_fingerprint(&dataset)?;
    let drivers = match pk_fit {
        Some(path) => {
            let rec = RunRecord::load(path)?;
            let (Some(spec), Some(fit)) = (rec.spec.as_ref(), rec.fit.as_ref()) else {
                bail!("{} is not an original-data record with a fit", path.display());
            };
            Some(sequential_pd_prepare(fit, spec, &dataset).with_context(|| format!("PK fit {}", path.display()))?)
        }
        None => None,
    };
    for file in model_files(models)? {
        let spec = load_spec(&file)?;
        let records = run_model(&spec, &store, &dataset, drivers.as_ref(), &options, out)?;
        let failed = records.iter().filter(|r| !r.is_ok()).count();
        println!("{}: {} records, {} failed", spec.label, records.len(), failed);
    }
    Ok(())
}

fn report(results: &Path, stats: Vec<Statistic>, formats: Vec<Format>, out: &Path) -> Result<()> {
    let config = ReportConfig {
        statistics: if stats.is_empty() {
            Statistic::ALL.to_vec()
        } else {
            stats
        },
        out_dir: out.to_path_buf(),
        formats,
    };
    let (_, rankings) = report_directory(results, &config)?;
    for r in rankings {
        println!("{} ({:?}, by testing median)", r.statistic, r.direction);
        for (i, e) in r.entries.iter().enumerate() {
            let show = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
            println!(
                "  {:>2}. {:<12} testing {:>14}  training {:>14}  original {:>14}",
                i + 1,
                e.model,
                show(e.testing_median),
                show(e.training_median),
                show(e.original)
            );
        }
    }
    println!("wrote reports to {}", out.display());
    Ok(())
}

fn simulate(model: &Path, pk_model: Option<&Path>, n_subjects: usize, seed: u64, out: &Path) -> Result<()> {
    let spec = load_spec(model)?;
    let design = SimulationDesign {
        n_subjects,
        seed,
        ..SimulationDesign::default()
    };
    let dataset = match (spec.structural.is_pk(), pk_model) {
        (true, _) => simulate_pk(&spec, &spec.initial_theta(), &design)?,
        (false, Some(pk)) => {
            let pk = load_spec(pk)?;
            simulate_pkpd(&pk, &pk.initial_theta(), &spec, &spec.initial_theta(), &design)?
        }
        (false, None) => bail!("`{}` is a PD model; pass --pk-model", spec.label),
    };
    std::fs::write(out, dataset.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} subjects to {}", dataset.len(), out.display());
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate { data, b, seed, out } => generate(&data, b, seed, &out),
        Command::Run {
            models,
            store,
            data,
            ll_mode,
            is_samples,
            jobs,
            out,
            pk_fit,
            eps_sim_draws,
            seed,
            outer_tolerance,
            max_iters,
            no_resume,
        } => {
            let options = RunOptions {
                fit: FitOptions {
                    ll_mode: match ll_mode {
                        Mode::Laplace => LlMode::Laplace,
                        Mode::Is => LlMode::ImportanceSampling,
                    },
                    is_samples,
                    seed,
                    outer_tolerance,
                    outer_max_iters: max_iters,
                    ..FitOptions::default()
                },
                eps_sim_draws,
                jobs,
                resume: !no_resume,
            };
            run(&models, &store, &data, options, pk_fit.as_deref(), &out)
        }
        Command::Report {
            results,
            stats,
            formats,
            out,
        } => report(&results, stats, formats, &out),
        Command::Simulate {
            model,
            pk_model,
            n_subjects,
            seed,
            out,
        } => simulate(&model, pk_model.as_deref(), n_subjects, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
