//! Response time courses of the four indirect response variants driven by
//! the same one-compartment concentration profile.
//!
//! ```text
//! cargo run --example irm_simulation
//! ```

use bscv::model::{pk_one_compartment, solve_irm, IrmParams, IrmVariant, Pk1Params};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pk = Pk1Params {
        ka: 1.0,
        v: 8.0,
        cl: 0.13,
        tlag: 0.8,
    };
    let conc = |t: f64| pk_one_compartment(t, 100.0, &pk);
    let p = IrmParams {
        r0: 100.0,
        kout: 0.05,
        imax: Some(0.9),
        ic50: Some(1.5),
        emax: Some(0.5),
        ec50: Some(2.0),
        gamma_i: 1.0,
        gamma_e: 1.0,
    };
    let times = [0.0, 12.0, 24.0, 48.0, 72.0, 96.0, 144.0, 240.0];
    let variants = [
        IrmVariant::InhibitInput,
        IrmVariant::StimulateOutput,
        IrmVariant::InhibitInputFullImax,
        IrmVariant::Combined,
    ];
    print!("{:>6} {:>8}", "t", "conc");
    for v in variants {
        print!(" {:>24}", format!("{v:?}"));
    }
    println!();
    let curves = variants
        .iter()
        .map(|&v| solve_irm(conc, &p, v, &times, 1e-8, 1e-10))
        .collect::<Result<Vec<_>, _>>()?;
    for (i, t) in times.iter().enumerate() {
        print!("{t:>6} {:>8.3}", conc(*t));
        for c in &curves {
            print!(" {:>24.3}", c[i]);
        }
        println!();
    }
    Ok(())
}
