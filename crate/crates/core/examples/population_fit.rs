//! Simulate a 1-compartment study with known population values and recover
//! them by Laplace maximum likelihood.
//!
//! ```text
//! cargo run --release --example population_fit
//! ```

use std::time::Instant;

use bscv::estimate::{fit_population, FitOptions, SpecModel};
use bscv::model::ModelSpec;
use bscv::simulate::{simulate_pk, SimulationDesign};

const TRUTH: &str = r#"
label = "one_cmt"
[structural]
model = "one_compartment"
[error]
form = "combined1"
a = 0.1
b = 0.1
[parameters]
ka = { pop = 1.0 }
V = { pop = 8.0 }
Cl = { pop = 0.13 }
[omega]
sd = { ka = 0.4, V = 0.2, Cl = 0.25 }
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let truth = ModelSpec::from_toml_str(TRUTH)?;
    let design = SimulationDesign {
        seed: 2024,
        ..SimulationDesign::default()
    };
    let data = simulate_pk(&truth, &truth.initial_theta(), &design)?;
    println!(
        "simulated {} subjects, {} concentrations",
        data.len(),
        data.n_obs(truth.channel)
    );

    // Start away from the truth.
    let mut start = truth.clone();
    for (p, v) in start.parameters.iter_mut().zip([2.0, 5.0, 0.2]) {
        p.pop_value = v;
    }
    let model = SpecModel::new(&start);
    let t0 = Instant::now();
    let fit = fit_population(&model, &data, &FitOptions::default())?;
    println!(
        "-2LL {:.3}  converged {}  iterations {}  evaluations {}  ({:.1?})",
        fit.minus2ll,
        fit.converged,
        fit.iterations,
        fit.evaluations,
        t0.elapsed()
    );
    for (name, truth_value) in truth.initial_theta().to_named(&truth) {
        println!(
            "{name:>10}  truth {truth_value:>8.4}  estimate {:>8.4}",
            fit.theta[&name]
        );
    }
    Ok(())
}
