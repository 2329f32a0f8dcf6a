//! Sequential PK→PD: fit the PK model, freeze each subject's concentration
//! curve, then fit an indirect response model on the responses.
//!
//! ```text
//! cargo run --release --example sequential_pkpd
//! ```

use std::time::Instant;

use bscv::estimate::{fit_population, sequential_pd_prepare, FitOptions, SpecModel};
use bscv::model::ModelSpec;
use bscv::simulate::{simulate_pkpd, SimulationDesign};

const PK: &str = r#"
label = "pk"
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

const PD: &str = r#"
label = "pd"
[structural]
model = "irm"
variant = "inhibit_input"
[error]
form = "combined1"
a = 2.0
b = 0.02
[parameters]
R0 = { pop = 100.0 }
kout = { pop = 0.05 }
Imax = { pop = 0.9 }
IC50 = { pop = 1.5 }
[omega]
sd = { R0 = 0.1, kout = 0.2, Imax = 0.3, IC50 = 0.3 }
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pk = ModelSpec::from_toml_str(PK)?;
    let pd = ModelSpec::from_toml_str(PD)?;
    let design = SimulationDesign {
        n_subjects: 12,
        seed: 8,
        ..SimulationDesign::default()
    };
    let data = simulate_pkpd(&pk, &pk.initial_theta(), &pd, &pd.initial_theta(), &design)?;
    let options = FitOptions::default();

    let t0 = Instant::now();
    let pk_fit = fit_population(&SpecModel::new(&pk), &data, &options)?;
    println!(
        "PK  -2LL {:.3} converged {} ({:.1?})",
        pk_fit.minus2ll,
        pk_fit.converged,
        t0.elapsed()
    );

    let drivers = sequential_pd_prepare(&pk_fit, &pk, &data)?;
    let t0 = Instant::now();
    let pd_fit = fit_population(&SpecModel::with_drivers(&pd, &drivers), &data, &options)?;
    println!(
        "PD  -2LL {:.3} converged {} ({:.1?})",
        pd_fit.minus2ll,
        pd_fit.converged,
        t0.elapsed()
    );
    for (name, v) in pd.initial_theta().to_named(&pd) {
        println!("{name:>12}  truth {v:>9.4}  estimate {:>9.4}", pd_fit.theta[&name]);
    }
    Ok(())
}
