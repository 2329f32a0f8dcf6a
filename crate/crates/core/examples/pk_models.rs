//! Closed-form compartmental curves next to a numerical solution of the
//! underlying amount equations.
//!
//! ```text
//! cargo run --example pk_models
//! ```

use bscv::model::ode::{integrate, OdeOptions};
use bscv::model::{pk_one_compartment, pk_two_compartment_conc, pk_two_compartment_macro, Pk1Params, Pk2Params};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dose = 100.0;
    let one = Pk1Params {
        ka: 1.0,
        v: 8.0,
        cl: 0.13,
        tlag: 0.8,
    };
    let two = Pk2Params {
        ka: 1.0,
        cl: 0.13,
        v1: 7.0,
        q: 0.5,
        v2: 3.0,
        tlag: 0.8,
    };
    let m = pk_two_compartment_macro(&two)?;
    println!(
        "macro constants: alpha {:.6}, beta {:.6}, A {:.6}, B {:.6}",
        m.alpha, m.beta, m.a, m.b
    );

    let times: Vec<f64> = [1.0, 2.0, 6.0, 12.0, 24.0, 48.0, 96.0, 120.0].to_vec();
    let opts = OdeOptions {
        rtol: 1e-10,
        atol: 1e-14,
        ..OdeOptions::default()
    };
    let (k10, k12, k21) = (two.cl / two.v1, two.q / two.v1, two.q / two.v2);
    let ode = integrate(
        |_t, y, dy| {
            dy[0] = -two.ka * y[0];
            dy[1] = two.ka * y[0] - (k10 + k12) * y[1] + k21 * y[2];
            dy[2] = k12 * y[1] - k21 * y[2];
        },
        two.tlag,
        &[dose, 0.0, 0.0],
        &times,
        &opts,
    )?;

    println!("{:>6} {:>12} {:>12} {:>12}", "t", "1-cmt", "2-cmt", "2-cmt ODE");
    for (t, y) in times.iter().zip(&ode) {
        println!(
            "{t:>6} {:>12.6} {:>12.6} {:>12.6}",
            pk_one_compartment(*t, dose, &one),
            pk_two_compartment_conc(*t, dose, &m, two.ka, two.tlag),
            y[1] / two.v1
        );
    }
    Ok(())
}
