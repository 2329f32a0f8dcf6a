//! Conditional mode of η (the EBE) and the Laplace approximation.

use std::f64::consts::PI;

use super::{EstimateError, InnerOptions, PopulationModel, Result};
use crate::dataset::{Dataset, Subject};
use crate::optim::{nelder_mead, NelderMeadOptions};
use nalgebra::{DMatrix, DVector};

const JAC_STEP: f64 = 1e-4;
/// Expected decrease of the objective below which the mode is final.
const DECREMENT_FLOOR: f64 = 1e-10;
const POLISH_STEP: f64 = 0.01;

/// Cholesky-derived quantities of Ω shared by all subjects at one theta.
#[derive(Debug, Clone)]
pub(crate) struct Prior {
    pub k: usize,
    pub cov: DMatrix<f64>,
    pub inv: DMatrix<f64>,
    /// `log det(2π·Ω)`.
    pub log_det_2pi: f64,
}

impl Prior {
    pub fn new(omega: DMatrix<f64>) -> Result<Prior> {
        let k = omega.nrows();
        if k == 0 {
            return Ok(Prior {
                k,
                inv: omega.clone(),
                cov: omega,
                log_det_2pi: 0.0,
            });
        }
        let chol = omega
            .clone()
            .cholesky()
            .ok_or_else(|| EstimateError::NonFiniteObjective("omega is not positive definite".into()))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_det_2pi = k as f64 * (2.0 * PI).ln() + log_det;
        if !log_det_2pi.is_finite() {
            return Err(EstimateError::NonFiniteObjective("omega determinant".into()));
        }
        Ok(Prior {
            k,
            inv: chol.inverse(),
            cov: omega,
            log_det_2pi,
        })
    }

    fn quad(&self, eta: &[f64]) -> f64 {
        let v = DVector::from_column_slice(eta);
        (v.transpose() * &self.inv * &v)[(0, 0)]
    }
}

/// Result of the inner optimization for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaMode {
    pub eta: Vec<f64>,
    /// Curvature of the conditional −2·log joint at `eta` (expected
    /// information form, symmetric positive definite).
    pub hessian: DMatrix<f64>,
    /// Conditional −2·log joint at `eta`.
    pub objective: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl EtaMode {
    /// Laplace approximation of the subject's −2 log marginal likelihood.
    pub fn laplace(&self) -> f64 {
        if self.eta.is_empty() {
            return self.objective;
        }
        let scaled = &self.hessian / (4.0 * PI);
        let log_det = match scaled.cholesky() {
            Some(ch) => ch.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum(),
            None => f64::NAN,
        };
        self.objective + log_det
    }
}

/// The conditional −2·log p(y, η | θ) of one subject.
pub(crate) struct Conditional<'a, M: PopulationModel> {
    pub model: &'a M,
    pub theta: &'a M::Theta,
    pub subject: &'a Subject,
    pub prior: &'a Prior,
    pub y: Vec<f64>,
}

struct Linearization {
    cost: f64,
    grad: DVector<f64>,
    info: DMatrix<f64>,
}

impl<'a, M: PopulationModel> Conditional<'a, M> {
    pub fn new(model: &'a M, theta: &'a M::Theta, subject: &'a Subject, prior: &'a Prior) -> Self {
        Conditional {
            model,
            theta,
            subject,
            prior,
            y: model.observations(subject),
        }
    }

    fn data_term(&self, f: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (&y, &fj) in self.y.iter().zip(f) {
            if !fj.is_finite() {
                return Err(EstimateError::NonFiniteObjective(format!(
                    "prediction for subject `{}`",
                    self.subject.id
                )));
            }
            let g = self.model.error_sd(self.theta, fj)?;
            let r = y - fj;
            total += (2.0 * PI * g * g).ln() + r * r / (g * g);
        }
        Ok(total)
    }

    pub fn predict(&self, eta: &[f64]) -> Result<Vec<f64>> {
        if self.y.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.model.predict(self.theta, self.subject, eta)?)
    }

    pub fn cost(&self, eta: &[f64]) -> Result<f64> {
        let f = self.predict(eta)?;
        let c = self.data_term(&f)? + self.prior.quad(eta) + self.prior.log_det_2pi;
        if c.is_finite() {
            Ok(c)
        } else {
            Err(EstimateError::NonFiniteObjective(format!(
                "subject `{}`",
                self.subject.id
            )))
        }
    }

    fn cost_or_inf(&self, eta: &[f64]) -> f64 {
        self.cost(eta).unwrap_or(f64::INFINITY)
    }

    fn jacobian(&self, eta: &[f64], f0: &[f64]) -> Result<DMatrix<f64>> {
        let (n, k) = (f0.len(), eta.len());
        let mut jac = DMatrix::<f64>::zeros(n, k);
        let mut e = eta.to_vec();
        for j in 0..k {
            e[j] = eta[j] + JAC_STEP;
            let plus = self.predict(&e).ok();
            e[j] = eta[j] - JAC_STEP;
            let minus = self.predict(&e).ok();
            e[j] = eta[j];
            let (hi, lo, width): (&[f64], &[f64], f64) = match (&plus, &minus) {
                (Some(p), Some(m)) => (p, m, 2.0 * JAC_STEP),
                (Some(p), None) => (p, f0, JAC_STEP),
                (None, Some(m)) => (f0, m, JAC_STEP),
                (None, None) => {
                    return Err(EstimateError::NonFiniteObjective(format!(
                        "prediction Jacobian for subject `{}`",
                        self.subject.id
                    )))
                }
            };
            for i in 0..n {
                jac[(i, j)] = (hi[i] - lo[i]) / width;
            }
        }
        Ok(jac)
    }

    fn linearize(&self, eta: &[f64]) -> Result<Linearization> {
        let k = eta.len();
        let f = self.predict(eta)?;
        let cost = self.data_term(&f)? + self.prior.quad(eta) + self.prior.log_det_2pi;
        if !cost.is_finite() {
            return Err(EstimateError::NonFiniteObjective(format!(
                "subject `{}`",
                self.subject.id
            )));
        }
        let eta_v = DVector::from_column_slice(eta);
        let mut grad = 2.0 * &self.prior.inv * &eta_v;
        let mut info = 2.0 * &self.prior.inv;
        if !f.is_empty() {
            let jac = self.jacobian(eta, &f)?;
            for (i, (&y, &fi)) in self.y.iter().zip(&f).enumerate() {
                let g = self.model.error_sd(self.theta, fi)?;
                let dg = self.model.error_sd_slope(self.theta, fi);
                let r = y - fi;
                let w = 2.0 * dg / g - 2.0 * r / (g * g) - 2.0 * r * r * dg / (g * g * g);
                let c = 2.0 * (1.0 + 2.0 * dg * dg) / (g * g);
                for a in 0..k {
                    let ja = jac[(i, a)];
                    grad[a] += w * ja;
                    for b in 0..k {
                        info[(a, b)] += c * ja * jac[(i, b)];
                    }
                }
            }
        }
        Ok(Linearization { cost, grad, info })
    }

    /// Damped Gauss–Newton (Fisher scoring) from `start`.
    fn descend(&self, start: &[f64], opts: &InnerOptions) -> Result<EtaMode> {
        let mut eta = start.to_vec();
        let mut lin = self.linearize(&eta)?;
        let mut iterations = 0;
        while iterations < opts.max_iters {
            let chol = match lin.info.clone().cholesky() {
                Some(c) => c,
                None => break,
            };
            let step = -chol.solve(&lin.grad);
            let decrement = -lin.grad.dot(&step);
            if !(decrement > DECREMENT_FLOOR) {
                break;
            }
            iterations += 1;
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let trial: Vec<f64> = eta.iter().zip(step.iter()).map(|(e, s)| e + alpha * s).collect();
                let c = self.cost_or_inf(&trial);
                if c <= lin.cost - 1e-4 * alpha * decrement {
                    accepted = Some(trial);
                    break;
                }
                alpha *= 0.5;
            }
            match accepted {
                Some(trial) => {
                    eta = trial;
                    lin = self.linearize(&eta)?;
                }
                None => break,
            }
        }
        let grad_norm = lin.grad.amax();
        let decrement = lin
            .info
            .clone()
            .cholesky()
            .map_or(f64::INFINITY, |c| lin.grad.dot(&c.solve(&lin.grad)));
        Ok(EtaMode {
            eta,
            hessian: lin.info,
            objective: lin.cost,
            grad_norm,
            converged: grad_norm <= opts.tolerance || decrement <= DECREMENT_FLOOR,
            iterations,
        })
    }

    /// Simplex search from a stalled descent. Modes that sit on a kink of
    /// the objective (a capped individual parameter) have no vanishing
    /// gradient; a collapsed simplex that does not improve on them is
    /// accepted instead.
    fn polish(&self, mode: EtaMode) -> Result<EtaMode> {
        let k = mode.eta.len();
        let nm = NelderMeadOptions {
            max_iters: 200 * k,
            ftol: 1e-12,
            xtol: 1e-7,
        };
        let m = nelder_mead(|e| self.cost_or_inf(e), &mode.eta, &vec![POLISH_STEP; k], &nm);
        if !m.converged || !(m.fx <= mode.objective) {
            return Ok(mode);
        }
        let lin = self.linearize(&m.x)?;
        Ok(EtaMode {
            eta: m.x,
            hessian: lin.info,
            objective: lin.cost,
            grad_norm: lin.grad.amax(),
            converged: true,
            iterations: mode.iterations + m.iterations,
        })
    }

    /// Descend from `start` first and keep the result if it converges;
    /// otherwise fall back to [`find_mode`](Self::find_mode).
    pub fn find_mode_from(&self, start: Option<&[f64]>, opts: &InnerOptions) -> Result<EtaMode> {
        if let Some(start) = start.filter(|s| s.len() == self.prior.k && self.prior.k > 0) {
            if let Ok(mode) = self.descend(start, opts) {
                if mode.converged {
                    return Ok(mode);
                }
            }
        }
        self.find_mode(opts)
    }

    /// Best mode over the multistart points; `converged` may be false.
    pub fn find_mode(&self, opts: &InnerOptions) -> Result<EtaMode> {
        let k = self.prior.k;
        if k == 0 {
            return Ok(EtaMode {
                eta: Vec::new(),
                hessian: DMatrix::zeros(0, 0),
                objective: self.cost(&[])?,
                grad_norm: 0.0,
                converged: true,
                iterations: 0,
            });
        }
        let mut best = self.descend(&vec![0.0; k], opts)?;
        for s in 1..opts.multistart.max(1) {
            let axis = ((s - 1) / 2) % k;
            let ring = 1.0 + ((s - 1) / (2 * k)) as f64;
            let sign = if (s - 1) % 2 == 0 { 1.0 } else { -1.0 };
            let mut start = vec![0.0; k];
            start[axis] = sign * ring * self.prior.cov[(axis, axis)].sqrt();
            if let Ok(mode) = self.descend(&start, opts) {
                if mode.objective < best.objective {
                    best = mode;
                }
            }
        }
        if best.converged {
            Ok(best)
        } else {
            self.polish(best)
        }
    }
}

/// Conditional mode of η for one subject and the curvature there.
pub fn map_etas<M: PopulationModel>(
    model: &M,
    theta: &M::Theta,
    subject: &Subject,
    opts: &InnerOptions,
) -> Result<EtaMode> {
    let prior = Prior::new(model.omega(theta))?;
    let mode = Conditional::new(model, theta, subject, &prior).find_mode(opts)?;
    if mode.converged {
        Ok(mode)
    } else {
        Err(EstimateError::InnerNonConvergence {
            subject: subject.id.clone(),
            grad_norm: mode.grad_norm,
        })
    }
}

/// Σ over subjects of the Laplace-approximated −2 log marginal likelihood.
pub fn laplace_m2ll<M: PopulationModel>(
    model: &M,
    theta: &M::Theta,
    dataset: &Dataset,
    opts: &InnerOptions,
) -> Result<f64> {
    let prior = Prior::new(model.omega(theta))?;
    let mut total = 0.0;
    for subject in dataset.subjects() {
        let mode = Conditional::new(model, theta, subject, &prior).find_mode(opts)?;
        if !mode.converged {
            return Err(EstimateError::InnerNonConvergence {
                subject: subject.id.clone(),
                grad_norm: mode.grad_norm,
            });
        }
        total += mode.laplace();
    }
    if total.is_finite() {
        Ok(total)
    } else {
        Err(EstimateError::NonFiniteObjective("Laplace sum".into()))
    }
}

/// Last converged mode of each subject, used as the next starting point.
pub(crate) type WarmStarts = Vec<Option<Vec<f64>>>;

/// Lenient objective used inside the outer search: any subject failure
/// makes the whole point infeasible.
pub(crate) fn laplace_objective<M: PopulationModel>(
    model: &M,
    theta: &M::Theta,
    dataset: &Dataset,
    opts: &InnerOptions,
    warm: &mut WarmStarts,
) -> f64 {
    let prior = match Prior::new(model.omega(theta)) {
        Ok(p) => p,
        Err(_) => return f64::INFINITY,
    };
    warm.resize(dataset.len(), None);
    let mut total = 0.0;
    for (subject, slot) in dataset.subjects().iter().zip(warm.iter_mut()) {
        match Conditional::new(model, theta, subject, &prior).find_mode_from(slot.as_deref(), opts) {
            Ok(mode) => {
                total += mode.laplace();
                if mode.converged {
                    *slot = Some(mode.eta);
                }
            }
            Err(_) => return f64::INFINITY,
        }
    }
    if total.is_finite() {
        total
    } else {
        f64::INFINITY
    }
}
