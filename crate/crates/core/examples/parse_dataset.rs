//! Read a longitudinal PK/PD table, show what the parser keeps, and compute
//! the fingerprint that ties a replicate store to this exact data.
//!
//! ```text
//! cargo run --example parse_dataset [path.csv]
//! ```

use bscv::dataset::{parse_dataset, Channel, CsvSchema};

const SAMPLE: &str = "\
ID,TIME,AMT,DV,DVID,WT,AGE,SEX
1,0,100,.,.,66.7,50,M
1,0.5,.,0.0,1,66.7,50,M
1,24,.,9.2,1,66.7,50,M
1,24,.,44,2,66.7,50,M
1,72,.,5.1,1,66.7,50,M
1,72,.,32,2,66.7,50,M
2,0,150,.,.,80,31,F
2,1,.,1.9,1,80,31,F
2,36,.,7.7,1,80,31,F
2,36,.,61,2,80,31,F
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = match std::env::args().nth(1) {
        Some(path) => std::fs::read_to_string(path)?,
        None => SAMPLE.to_string(),
    };
    let data = parse_dataset(&text, &CsvSchema::default())?;
    for s in data.subjects() {
        println!(
            "subject {:>3}: {} dose(s), {} concentrations, {} responses, weight {:?}, age {:?}",
            s.id,
            s.doses.len(),
            s.n_obs(Channel::Y1Pk),
            s.n_obs(Channel::Y2Pd),
            s.covariates.weight,
            s.covariates.age
        );
    }
    println!("fingerprint {}", data.fingerprint());

    // Malformed input is reported with its row.
    let bad = "ID,TIME,AMT,DV,DVID,WT,AGE,SEX\n1,0,100,.,.,-70,50,M\n";
    if let Err(e) = parse_dataset(bad, &CsvSchema::default()) {
        println!("rejected: {e}");
    }
    Ok(())
}
