//! Dormand–Prince 5(4) integrator with embedded error control.

use super::ModelError;

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order weights (same as the last stage row, FSAL).
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub min_step: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 200_000,
            min_step: 1e-12,
        }
    }
}

/// Integrate `y' = f(t, y)` from `(t0, y0)` and report the state at each of
/// `times` (ascending, all `>= t0`). The step is shortened to land exactly on
/// every output time.
pub fn integrate<F>(f: F, t0: f64, y0: &[f64], times: &[f64], opts: &OdeOptions) -> Result<Vec<Vec<f64>>, ModelError>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut out = Vec::with_capacity(times.len());
    let mut k = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut steps = 0usize;

    let span = times.last().map(|&tl| (tl - t0).abs()).unwrap_or(0.0);
    let mut h = (span * 1e-3).clamp(1e-6, 0.1);

    f(t, &y, &mut k[0]);
    for &target in times {
        if target < t {
            return Err(ModelError::UnsortedTimes);
        }
        while t < target {
            if steps >= opts.max_steps {
                return Err(ModelError::StepSizeUnderflow { t });
            }
            let mut last = false;
            let mut step = h;
            if t + step >= target {
                step = target - t;
                last = true;
            }
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = y[i];
                    for (j, kj) in k.iter().enumerate().take(s) {
                        acc += step * A[s][j] * kj[i];
                    }
                    stage[i] = acc;
                }
                f(t + C[s] * step, &stage, &mut k[s]);
            }
            let mut err = 0.0f64;
            for i in 0..n {
                let mut hi = y[i];
                let mut lo = y[i];
                for s in 0..7 {
                    hi += step * B5[s] * k[s][i];
                    lo += step * B4[s] * k[s][i];
                }
                y_new[i] = hi;
                let scale = opts.atol + opts.rtol * y[i].abs().max(hi.abs());
                err = err.max(((hi - lo) / scale).abs());
            }
            steps += 1;
            if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                if step <= opts.min_step {
                    return Err(ModelError::NonFiniteState { t });
                }
                h = step * 0.1;
                continue;
            }
            if err <= 1.0 {
                t = if last { target } else { t + step };
                y.copy_from_slice(&y_new);
                // FSAL: stage 7 is f(t + h, y_new).
                let (first, rest) = k.split_at_mut(1);
                first[0].copy_from_slice(&rest[5]);
                let grow = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                if !last || grow < 1.0 {
                    h = step * grow;
                }
            } else {
                let shrink = (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                h = step * shrink;
                if h < opts.min_step {
                    return Err(ModelError::StepSizeUnderflow { t });
                }
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}
