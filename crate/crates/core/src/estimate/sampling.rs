//! Monte-Carlo treatment of the random effects: importance sampling of the
//! marginal likelihood and random-walk sampling of the conditional
//! distribution.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use super::inner::{Conditional, EtaMode, Prior};
use super::{EstimateError, InnerOptions, PopulationModel, Result};
use crate::dataset::{Dataset, Subject};
use crate::seed;

/// Degrees of freedom of the Student-t proposal.
const PROPOSAL_DF: f64 = 5.0;
const MIN_ESS: f64 = 10.0;
const BURN_IN: usize = 500;
const THIN: usize = 5;

/// `ln Γ(m/2)` for a positive integer `m`.
fn ln_gamma_half(m: u32) -> f64 {
    let n = m / 2;
    if m.is_multiple_of(2) {
        (1..n).map(|i| (i as f64).ln()).sum()
    } else {
        // Γ(n + 1/2) = √π · Π_{i=1..n} (i − 1/2)
        0.5 * std::f64::consts::PI.ln() + (1..=n).map(|i| (i as f64 - 0.5).ln()).sum::<f64>()
    }
}

/// Lower Cholesky factor of the Laplace covariance `(H/2)⁻¹`, scaled.
fn proposal_factor(mode: &EtaMode, scale: f64, subject: &str) -> Result<DMatrix<f64>> {
    let cov = mode
        .hessian
        .clone()
        .try_inverse()
        .map(|inv| inv * (2.0 * scale))
        .ok_or_else(|| EstimateError::NonFiniteObjective(format!("singular curvature for subject `{subject}`")))?;
    let chol = cov
        .cholesky()
        .ok_or_else(|| EstimateError::NonFiniteObjective(format!("curvature for subject `{subject}`")))?;
    Ok(chol.l())
}

/// Per-subject stream seed; keyed by id so results do not depend on the
/// subject's position in the dataset.
pub(crate) fn subject_seed(master: u64, subject: &Subject) -> u64 {
    seed::derive(master, &[seed::hash_str(&subject.id)])
}

/// Importance-sampling estimate of one subject's −2 log marginal and the
/// variance of its log-likelihood estimate.
pub(crate) fn is_subject<M: PopulationModel>(
    cond: &Conditional<'_, M>,
    mode: &EtaMode,
    n: usize,
    master_seed: u64,
) -> Result<(f64, f64)> {
    let k = mode.eta.len();
    if k == 0 {
        return Ok((mode.objective, 0.0));
    }
    let l = proposal_factor(mode, 1.0, &cond.subject.id)?;
    let log_det_sigma: f64 = l.diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let kf = k as f64;
    let log_norm = ln_gamma_half((PROPOSAL_DF as u32) + k as u32)
        - ln_gamma_half(PROPOSAL_DF as u32)
        - 0.5 * kf * (PROPOSAL_DF * std::f64::consts::PI).ln()
        - 0.5 * log_det_sigma;

    let mut rng = seed::rng(subject_seed(master_seed, cond.subject));
    let chi = ChiSquared::new(PROPOSAL_DF).expect("positive degrees of freedom");
    let center = DVector::from_column_slice(&mode.eta);
    let mut log_w = Vec::with_capacity(n);
    for _ in 0..n {
        let z = DVector::<f64>::from_fn(k, |_, _| rng.sample(StandardNormal));
        let u: f64 = chi.sample(&mut rng);
        let eta = &center + &l * &z * (PROPOSAL_DF / u).sqrt();
        let log_q = log_norm - 0.5 * (PROPOSAL_DF + kf) * (z.norm_squared() / u).ln_1p();
        let lw = match cond.cost(eta.as_slice()) {
            Ok(c) => -0.5 * c - log_q,
            Err(_) => f64::NEG_INFINITY,
        };
        log_w.push(lw);
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(EstimateError::DegenerateWeights {
            subject: cond.subject.id.clone(),
            ess: 0.0,
        });
    }
    let (s1, s2) = log_w.iter().fold((0.0, 0.0), |(a, b), &lw| {
        let w = (lw - max).exp();
        (a + w, b + w * w)
    });
    let ess = s1 * s1 / s2;
    if ess < MIN_ESS {
        return Err(EstimateError::DegenerateWeights {
            subject: cond.subject.id.clone(),
            ess,
        });
    }
    let nf = n as f64;
    let mean = s1 / nf;
    let var_w = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    let log_lik = max + mean.ln();
    Ok((-2.0 * log_lik, var_w / (nf * mean * mean)))
}

/// Importance-sampling −2LL over the dataset and its Monte-Carlo SE.
///
/// Each subject draws `is_samples` points from a Student-t (5 df) centred at
/// its EBE with the Laplace covariance as scale.
pub fn importance_sampling_m2ll<M: PopulationModel>(
    model: &M,
    theta: &M::Theta,
    dataset: &Dataset,
    is_samples: usize,
    seed: u64,
    inner: &InnerOptions,
) -> Result<(f64, f64)> {
    let prior = Prior::new(model.omega(theta))?;
    let (mut total, mut var) = (0.0, 0.0);
    for subject in dataset.subjects() {
        let cond = Conditional::new(model, theta, subject, &prior);
        let mode = cond.find_mode(inner)?;
        let (m2ll, v) = is_subject(&cond, &mode, is_samples, seed)?;
        total += m2ll;
        var += v;
    }
    Ok((total, 2.0 * var.sqrt()))
}

/// Draws from the conditional distribution of η given the subject's data,
/// by a random-walk Metropolis chain started at the EBE.
pub fn sample_conditional<M: PopulationModel>(
    model: &M,
    theta: &M::Theta,
    subject: &Subject,
    ndraws: usize,
    seed: u64,
    inner: &InnerOptions,
) -> Result<Vec<Vec<f64>>> {
    let prior = Prior::new(model.omega(theta))?;
    let cond = Conditional::new(model, theta, subject, &prior);
    let mode = cond.find_mode(inner)?;
    sample_from_mode(&cond, &mode, ndraws, seed)
}

pub(crate) fn sample_from_mode<M: PopulationModel>(
    cond: &Conditional<'_, M>,
    mode: &EtaMode,
    ndraws: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let k = mode.eta.len();
    if k == 0 {
        return Ok(vec![Vec::new(); ndraws]);
    }
    let l = proposal_factor(mode, 2.38 * 2.38 / k as f64, &cond.subject.id)?;
    let mut rng = seed::rng(subject_seed(seed, cond.subject));
    let mut current = DVector::from_column_slice(&mode.eta);
    let mut current_lp = -0.5 * mode.objective;
    let total = BURN_IN + ndraws * THIN;
    let mut accepted = 0usize;
    let mut draws = Vec::with_capacity(ndraws);
    for it in 0..total {
        let z = DVector::<f64>::from_fn(k, |_, _| rng.sample(StandardNormal));
        let proposal = &current + &l * z;
        let lp = cond.cost(proposal.as_slice()).map_or(f64::NEG_INFINITY, |c| -0.5 * c);
        let u: f64 = rng.random();
        if u.ln() < lp - current_lp {
            current = proposal;
            current_lp = lp;
            accepted += 1;
        }
        if it >= BURN_IN && (it - BURN_IN + 1).is_multiple_of(THIN) {
            draws.push(current.as_slice().to_vec());
        }
    }
    let acceptance = accepted as f64 / total as f64;
    if acceptance < 0.01 {
        return Err(EstimateError::ChainStuck {
            subject: cond.subject.id.clone(),
            acceptance,
        });
    }
    Ok(draws)
}
