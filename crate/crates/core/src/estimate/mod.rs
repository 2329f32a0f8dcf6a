//! Population fitting by approximate marginal likelihood.
//!
//! Each subject's random effects are integrated out with a Laplace
//! approximation around the conditional mode (the empirical Bayes estimate),
//! or by importance sampling from a heavy-tailed proposal centred there.
//! Population parameters are then found by a simplex search on a transformed,
//! unconstrained vector.
//!
//! Everything is generic over [`PopulationModel`] so that the same machinery
//! runs on [`SpecModel`] (configured PK/PD models) and on small analytic
//! models used as test oracles.

mod fit;
pub(crate) mod inner;
pub(crate) mod sampling;
mod sequential;

use std::collections::BTreeMap;
use std::fmt::Debug;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Subject};
use crate::model::residual::error_sd_slope;
use crate::model::{
    error_sd, individual_parameters, logistic, logit, predict_subject, ModelError, ModelSpec, PkCurve, Theta,
};

pub use fit::{evaluate_fixed, fit_population, fit_population_from};
pub use inner::{laplace_m2ll, map_etas, EtaMode};
pub use sampling::{importance_sampling_m2ll, sample_conditional};
pub use sequential::{drivers_from_ebes, sequential_pd_prepare, Drivers};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("inner optimization for subject `{subject}` stopped with gradient norm {grad_norm:.3e}")]
    InnerNonConvergence { subject: String, grad_norm: f64 },
    #[error("objective is not finite: {0}")]
    NonFiniteObjective(String),
    #[error("importance weights for subject `{subject}` are degenerate (ESS {ess:.1})")]
    DegenerateWeights { subject: String, ess: f64 },
    #[error("conditional sampler for subject `{subject}` is stuck (acceptance {acceptance:.4})")]
    ChainStuck { subject: String, acceptance: f64 },
    #[error("subject `{0}` has no EBEs in the PK fit")]
    MissingSubjectEbes(String),
    #[error("outer optimization did not converge after {iterations} iterations")]
    OuterNonConvergence { iterations: usize },
    #[error("invalid fit options: {0}")]
    InvalidOptions(String),
    #[error("dataset has no subjects")]
    EmptyDataset,
    #[error("every subject failed: {0}")]
    AllSubjectsFailed(String),
}

pub type Result<T> = std::result::Result<T, EstimateError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlMode {
    Laplace,
    ImportanceSampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerOptions {
    /// Gradient-norm target on η (∞-norm, −2·log-joint units).
    pub tolerance: f64,
    /// Number of starting points; the first is always η = 0.
    pub multistart: usize,
    pub max_iters: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        InnerOptions {
            tolerance: 1e-3,
            multistart: 1,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub outer_max_iters: usize,
    /// Relative change of the objective below which the search has converged.
    pub outer_tolerance: f64,
    pub inner_tolerance: f64,
    pub multistart_count: usize,
    pub inner_max_iters: usize,
    pub ll_mode: LlMode,
    pub is_samples: usize,
    pub seed: u64,
    /// Simplex restarts after the first run. With none, the first run's own
    /// convergence is accepted.
    pub max_restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            outer_max_iters: 4000,
            outer_tolerance: 1e-7,
            inner_tolerance: 1e-3,
            multistart_count: 1,
            inner_max_iters: 200,
            ll_mode: LlMode::Laplace,
            is_samples: 1000,
            seed: 1,
            max_restarts: 4,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EstimateError::InvalidOptions(m.to_string()));
        if !(self.outer_tolerance > 0.0) || !(self.inner_tolerance > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.multistart_count == 0 {
            return bad("multistart_count must be at least 1");
        }
        if self.ll_mode == LlMode::ImportanceSampling && self.is_samples < 100 {
            return bad("importance sampling needs at least 100 samples");
        }
        Ok(())
    }

    pub fn inner(&self) -> InnerOptions {
        InnerOptions {
            tolerance: self.inner_tolerance,
            multistart: self.multistart_count,
            max_iters: self.inner_max_iters,
        }
    }
}

/// What the estimator needs from a nonlinear mixed-effects model.
pub trait PopulationModel: Sync {
    type Theta: Clone + Debug + Send + Sync;

    fn n_eta(&self) -> usize;
    /// Number of estimated scalars.
    fn p_count(&self) -> usize;
    /// Observed values the model predicts, in the subject's order.
    fn observations(&self, subject: &Subject) -> Vec<f64>;
    fn predict(&self, theta: &Self::Theta, subject: &Subject, eta: &[f64])
        -> std::result::Result<Vec<f64>, ModelError>;
    fn error_sd(&self, theta: &Self::Theta, f: f64) -> std::result::Result<f64, ModelError>;
    /// `d g / d f`.
    fn error_sd_slope(&self, theta: &Self::Theta, f: f64) -> f64;
    fn omega(&self, theta: &Self::Theta) -> DMatrix<f64>;

    /// Starting point for a fit on `dataset`.
    fn initial_theta(&self, dataset: &Dataset) -> Self::Theta;
    /// Map the estimated scalars to an unconstrained vector of length `p_count`.
    fn pack(&self, theta: &Self::Theta) -> Vec<f64>;
    /// Inverse of [`pack`](Self::pack); fixed values come from `template`.
    fn unpack(&self, x: &[f64], template: &Self::Theta) -> Self::Theta;
    fn named(&self, theta: &Self::Theta) -> BTreeMap<String, f64>;
}

/// A [`ModelSpec`] viewed as a [`PopulationModel`]. PD specs need the
/// per-subject concentration drivers, looked up by the subject's origin id.
#[derive(Debug, Clone, Copy)]
pub struct SpecModel<'a> {
    pub spec: &'a ModelSpec,
    pub drivers: Option<&'a Drivers>,
}

impl<'a> SpecModel<'a> {
    pub fn new(spec: &'a ModelSpec) -> Self {
        SpecModel { spec, drivers: None }
    }

    pub fn with_drivers(spec: &'a ModelSpec, drivers: &'a Drivers) -> Self {
        SpecModel {
            spec,
            drivers: Some(drivers),
        }
    }

    fn driver(&self, subject: &Subject) -> Option<&'a PkCurve> {
        self.drivers.and_then(|d| d.get(&subject.origin))
    }
}

const MIN_POSITIVE: f64 = 1e-10;

fn ln_pos(v: f64) -> f64 {
    v.max(MIN_POSITIVE).ln()
}

/// Correlation coefficients (strict lower triangle, row-major) to
/// unconstrained Cholesky-angle coordinates.
fn corr_to_angles(m: usize, coefs: &[f64]) -> Vec<f64> {
    let mut r = DMatrix::<f64>::identity(m, m);
    let mut c = 0;
    for i in 1..m {
        for j in 0..i {
            r[(i, j)] = coefs[c];
            r[(j, i)] = coefs[c];
            c += 1;
        }
    }
    let l = match r.cholesky() {
        Some(ch) => ch.l(),
        None => return vec![0.0; coefs.len()],
    };
    let mut out = Vec::with_capacity(coefs.len());
    for i in 1..m {
        let mut used = 0.0f64;
        for j in 0..i {
            let remaining = (1.0 - used).max(1e-300).sqrt();
            let z = (l[(i, j)] / remaining).clamp(-0.999_999, 0.999_999);
            out.push(z.atanh());
            used += l[(i, j)] * l[(i, j)];
        }
    }
    out
}

fn angles_to_corr(m: usize, x: &[f64]) -> Vec<f64> {
    let mut l = DMatrix::<f64>::zeros(m, m);
    l[(0, 0)] = 1.0;
    let mut c = 0;
    for i in 1..m {
        let mut used = 0.0f64;
        for j in 0..i {
            let z = x[c].tanh();
            c += 1;
            l[(i, j)] = z * (1.0 - used).max(0.0).sqrt();
            used += l[(i, j)] * l[(i, j)];
        }
        l[(i, i)] = (1.0 - used).max(0.0).sqrt();
    }
    let r = &l * l.transpose();
    let mut out = Vec::with_capacity(m * (m - 1) / 2);
    for i in 1..m {
        for j in 0..i {
            out.push(r[(i, j)]);
        }
    }
    out
}

impl PopulationModel for SpecModel<'_> {
    type Theta = Theta;

    fn n_eta(&self) -> usize {
        self.spec.n_eta()
    }

    fn p_count(&self) -> usize {
        self.spec.p_count()
    }

    fn observations(&self, subject: &Subject) -> Vec<f64> {
        subject.channel_values(self.spec.channel)
    }

    fn predict(&self, theta: &Theta, subject: &Subject, eta: &[f64]) -> std::result::Result<Vec<f64>, ModelError> {
        let psi = individual_parameters(self.spec, theta, &subject.covariates, eta)?;
        predict_subject(self.spec, &psi, subject, self.driver(subject))
    }

    fn error_sd(&self, theta: &Theta, f: f64) -> std::result::Result<f64, ModelError> {
        error_sd(f, &theta.error)
    }

    fn error_sd_slope(&self, theta: &Theta, f: f64) -> f64 {
        error_sd_slope(f, &theta.error)
    }

    fn omega(&self, theta: &Theta) -> DMatrix<f64> {
        self.spec.omega_covariance(theta)
    }

    /// Configured values, except that an estimated additive error term
    /// starts at 10% of the observation SD.
    fn initial_theta(&self, dataset: &Dataset) -> Theta {
        let mut theta = self.spec.initial_theta();
        if theta.error.estimate_a {
            let y: Vec<f64> = dataset.subjects().iter().flat_map(|s| self.observations(s)).collect();
            if y.len() > 1 {
                let mean = y.iter().sum::<f64>() / y.len() as f64;
                let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (y.len() - 1) as f64;
                let sd = var.sqrt();
                if sd > 0.0 && sd.is_finite() {
                    theta.error.a = 0.1 * sd;
                }
            }
        }
        theta
    }

    fn pack(&self, theta: &Theta) -> Vec<f64> {
        let spec = self.spec;
        let mut x = Vec::with_capacity(spec.p_count());
        for (i, p) in spec.parameters.iter().enumerate() {
            if p.fixed {
                continue;
            }
            x.push(if p.is_fraction() {
                logit(theta.pop[i].clamp(MIN_POSITIVE, 1.0 - MIN_POSITIVE))
            } else {
                ln_pos(theta.pop[i])
            });
        }
        for b in &theta.betas {
            x.extend_from_slice(b);
        }
        x.extend(theta.omega_sd.iter().map(|&s| ln_pos(s)));
        for (block, coefs) in spec.omega.correlation_blocks.iter().zip(&theta.correlations) {
            x.extend(corr_to_angles(block.parameters.len(), coefs));
        }
        let e = &theta.error;
        for (est, v) in [(e.estimate_a, e.a), (e.estimate_b, e.b), (e.estimate_c, e.c)] {
            if est {
                x.push(ln_pos(v));
            }
        }
        x
    }

    fn unpack(&self, x: &[f64], template: &Theta) -> Theta {
        let spec = self.spec;
        let mut t = template.clone();
        let mut it = x.iter().copied();
        let mut next = || it.next().expect("packed vector has p_count entries");
        for (i, p) in spec.parameters.iter().enumerate() {
            if p.fixed {
                continue;
            }
            t.pop[i] = if p.is_fraction() {
                logistic(next())
            } else {
                next().exp()
            };
        }
        for b in t.betas.iter_mut() {
            for v in b.iter_mut() {
                *v = next();
            }
        }
        for s in t.omega_sd.iter_mut() {
            *s = next().exp();
        }
        for (block, coefs) in spec.omega.correlation_blocks.iter().zip(t.correlations.iter_mut()) {
            let angles: Vec<f64> = (0..coefs.len()).map(|_| next()).collect();
            *coefs = angles_to_corr(block.parameters.len(), &angles);
        }
        let e = &mut t.error;
        if e.estimate_a {
            e.a = next().exp();
        }
        if e.estimate_b {
            e.b = next().exp();
        }
        if e.estimate_c {
            e.c = next().exp();
        }
        t
    }

    fn named(&self, theta: &Theta) -> BTreeMap<String, f64> {
        theta.to_named(self.spec)
    }
}

/// Population fit on a training dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<T = Theta> {
    /// Every scalar keyed by name.
    pub theta: BTreeMap<String, f64>,
    pub theta_hat: T,
    pub minus2ll: f64,
    /// Monte-Carlo SE of `minus2ll` (0 under Laplace).
    pub minus2ll_se: f64,
    pub ll_mode: LlMode,
    pub seed: u64,
    /// η̂ per subject id.
    pub ebes: BTreeMap<String, Vec<f64>>,
    pub converged: bool,
    pub n_obs: usize,
    pub p_count: usize,
    pub iterations: usize,
    pub evaluations: usize,
    /// Subjects excluded from the final objective, with the reason.
    pub failed_subjects: Vec<(String, String)>,
    /// Best Laplace objective after each simplex iteration.
    #[serde(skip)]
    pub history: Vec<f64>,
}

impl<T> FitResult<T> {
    pub fn require_converged(&self) -> Result<&Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(EstimateError::OuterNonConvergence {
                iterations: self.iterations,
            })
        }
    }
}

/// Fixed-parameter evaluation of a (usually held-out) dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestEvaluation {
    pub minus2ll: f64,
    pub minus2ll_se: f64,
    pub ll_mode: LlMode,
    pub seed: u64,
    pub ebes: BTreeMap<String, Vec<f64>>,
    /// Subject id of each observation.
    pub subject_ids: Vec<String>,
    pub obs: Vec<f64>,
    pub ipred: Vec<f64>,
    pub gpred: Vec<f64>,
    pub n_obs: usize,
    pub failed_subjects: Vec<(String, String)>,
}

#[cfg(test)]
pub(crate) mod testing;
