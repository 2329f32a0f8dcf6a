//! Derivative-free simplex minimization.
//!
//! Non-finite objective values are treated as +∞, so callers can signal an
//! infeasible point by returning `f64::INFINITY` (or NaN).

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_iters: usize,
    /// Stop when `f_worst − f_best <= ftol·(|f_best| + ftol)`.
    pub ftol: f64,
    /// Stop when every vertex lies within `xtol` of the best one (∞-norm).
    pub xtol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_iters: 2000,
            ftol: 1e-8,
            xtol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective after each iteration.
    pub history: Vec<f64>,
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Minimize `f` from `x0` with an axis-aligned initial simplex of the given
/// per-coordinate step sizes. Dimension-adaptive coefficients (Gao & Han) are
/// used so the search behaves in 8+ dimensions.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], steps: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evaluations = 0usize;
    let mut eval = |x: &[f64], evaluations: &mut usize| {
        *evaluations += 1;
        sanitize(f(x))
    };
    if n == 0 {
        let fx = eval(x0, &mut evaluations);
        return Minimum {
            x: Vec::new(),
            fx,
            iterations: 0,
            evaluations,
            converged: true,
            history: vec![fx],
        };
    }
    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf);

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0, &mut evaluations)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += steps[i];
        let fx = eval(&x, &mut evaluations);
        simplex.push((x, fx));
    }

    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut centroid = vec![0.0; n];
    let point =
        |c: &[f64], w: &[f64], t: f64| -> Vec<f64> { c.iter().zip(w).map(|(ci, wi)| ci + t * (wi - ci)).collect() };

    while iterations < opts.max_iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        history.push(best);
        if best.is_finite() {
            let fspread = worst - best;
            let xspread = simplex[1..]
                .iter()
                .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0f64, f64::max);
            if fspread <= opts.ftol * (best.abs() + opts.ftol) || xspread <= opts.xtol {
                converged = true;
                break;
            }
        }
        iterations += 1;

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / nf;
            }
        }
        let worst_x = simplex[n].0.clone();
        let xr = point(&centroid, &worst_x, -alpha);
        let fr = eval(&xr, &mut evaluations);
        if fr < simplex[0].1 {
            let xe = point(&centroid, &worst_x, -gamma);
            let fe = eval(&xe, &mut evaluations);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst {
            let xc = point(&centroid, &xr, rho);
            let fc = eval(&xc, &mut evaluations);
            (xc, fc)
        } else {
            let xc = point(&centroid, &worst_x, rho);
            let fc = eval(&xc, &mut evaluations);
            (xc, fc)
        };
        if fc < worst.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best_x = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            v.0 = point(&best_x, &v.0, sigma);
            v.1 = eval(&v.0, &mut evaluations);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    Minimum {
        x,
        fx,
        iterations,
        evaluations,
        converged,
        history,
    }
}
