//! Goodness-of-fit statistics on a small observed/predicted pair.
//!
//! ```text
//! cargo run --example metrics
//! ```

use bscv::metrics::{eps_shrinkage, iwres, median, residual_metrics, smpq, zero_intercept_r2};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let obs = [2.1, 4.8, 7.2, 9.5, 6.1, 3.0];
    let ipred = [2.0, 5.0, 7.0, 9.0, 6.5, 3.2];
    let gpred: Vec<f64> = ipred.iter().map(|f| 0.2 + 0.05 * f).collect();

    let r = residual_metrics(&obs, &ipred)?;
    println!(
        "RSS {:.4}  RMSE {:.4}  SAD {:.4}  MAD {:.4}",
        r.rss, r.rmse, r.sad, r.mad
    );

    let r2 = zero_intercept_r2(&obs, &ipred)?;
    println!("r² {r2:.6}  SMPQ {:.4}", smpq(r2));

    let w = iwres(&obs, &ipred, &gpred)?;
    println!(
        "IWRES {:?}",
        w.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    println!("ε-shrinkage {:.4}", eps_shrinkage(&w)?);
    println!("median IWRES {:.4}", median(&w).unwrap_or(f64::NAN));
    Ok(())
}
