//! Draw a replicate store, persist it, reload it, and look at one
//! training/testing split.
//!
//! ```text
//! cargo run --example bootstrap_store
//! ```

use bscv::bscv::{generate_replicates, inclusion_fraction, materialize, ReplicateStore};
use bscv::model::ModelSpec;
use bscv::simulate::{simulate_pk, SimulationDesign};

const MODEL: &str = r#"
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
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ModelSpec::from_toml_str(MODEL)?;
    let data = simulate_pk(&spec, &spec.initial_theta(), &SimulationDesign::default())?;

    let store = generate_replicates(&data, 1000, 42)?;
    let exact = 1.0 - (1.0 - 1.0 / data.len() as f64).powi(data.len() as i32);
    println!(
        "{} replicates, mean inclusion fraction {:.4} (exact {exact:.4})",
        store.b(),
        inclusion_fraction(&store)
    );

    let dir = tempfile::tempdir()?;
    let path = store.save(dir.path())?;
    let reloaded = ReplicateStore::load(&path)?;
    assert_eq!(reloaded, store);
    println!("store id {}", store.id());

    let (training, testing) = materialize(&store, 0, &data)?;
    println!("replicate 0 training: {}", training.ids().join(" "));
    println!("replicate 0 testing:  {}", testing.ids().join(" "));
    Ok(())
}
