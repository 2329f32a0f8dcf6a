//! End-to-end model selection on a synthetic study: a correctly specified
//! one-compartment model against the same model with an estimated error
//! exponent. Both run against one replicate store, then get ranked by
//! testing medians.
//!
//! ```text
//! cargo run --release --example model_selection -- [B] [seed]
//! ```

use std::time::Instant;

use bscv::bscv::{generate_replicates, run_model, RunOptions};
use bscv::estimate::FitOptions;
use bscv::metrics::Statistic;
use bscv::model::ModelSpec;
use bscv::report::{aggregate, rank_models};
use bscv::simulate::{simulate_pk, SimulationDesign};

const TRUE_MODEL: &str = r#"
label = "true"
[structural]
model = "one_compartment"
[error]
form = "combined1"
a = 0.2
b = 0.1
[parameters]
ka = { pop = 1.0 }
V = { pop = 8.0 }
Cl = { pop = 0.13 }
[omega]
sd = { ka = 0.4, V = 0.2, Cl = 0.25 }
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let b: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);

    let truth = ModelSpec::from_toml_str(TRUE_MODEL)?;
    let mut wide = truth.clone();
    wide.label = "exponent".into();
    wide.error = wide.error.with_exponent(1.0);

    let design = SimulationDesign {
        seed,
        ..SimulationDesign::default()
    };
    let data = simulate_pk(&truth, &truth.initial_theta(), &design)?;
    let store = generate_replicates(&data, b, seed)?;
    let out = tempfile::tempdir()?;
    let options = RunOptions {
        fit: FitOptions {
            max_restarts: 1,
            ..FitOptions::default()
        },
        eps_sim_draws: 0,
        ..RunOptions::default()
    };

    let mut records = Vec::new();
    for spec in [&truth, &wide] {
        let t0 = Instant::now();
        let recs = run_model(spec, &store, &data, None, &options, out.path())?;
        println!("{}: {} records in {:.1?}", spec.label, recs.len(), t0.elapsed());
        records.extend(recs);
    }

    let stats = [Statistic::Minus2ll, Statistic::Aic, Statistic::Rss];
    let ensembles = aggregate(&records, &stats)?;
    for stat in stats {
        let ranking = rank_models(&ensembles, stat)?;
        println!("{stat} ({:?})", ranking.direction);
        for e in &ranking.entries {
            println!(
                "  {:<9} original {:>10.3}  training {:>10.3}  testing {:>10.3}",
                e.model,
                e.original.unwrap_or(f64::NAN),
                e.training_median.unwrap_or(f64::NAN),
                e.testing_median.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
