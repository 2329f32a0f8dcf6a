//! Linear Gaussian random-intercept model, `y_j = mu + eta + sigma·e_j`,
//! `eta ~ N(0, omega²)`. Its marginal is Gaussian in closed form.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::PopulationModel;
use crate::dataset::{Channel, Covariates, Dataset, Observation, Subject};
use crate::model::ModelError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTheta {
    pub mu: f64,
    pub omega: f64,
    pub sigma: f64,
}

pub struct LinearToy;

impl PopulationModel for LinearToy {
    type Theta = ToyTheta;

    fn n_eta(&self) -> usize {
        1
    }

    fn p_count(&self) -> usize {
        3
    }

    fn observations(&self, subject: &Subject) -> Vec<f64> {
        subject.channel_values(Channel::Y1Pk)
    }

    fn predict(&self, t: &ToyTheta, subject: &Subject, eta: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(vec![t.mu + eta[0]; subject.n_obs(Channel::Y1Pk)])
    }

    fn error_sd(&self, t: &ToyTheta, _f: f64) -> Result<f64, ModelError> {
        Ok(t.sigma)
    }

    fn error_sd_slope(&self, _t: &ToyTheta, _f: f64) -> f64 {
        0.0
    }

    fn omega(&self, t: &ToyTheta) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, t.omega * t.omega)
    }

    fn initial_theta(&self, _d: &Dataset) -> ToyTheta {
        ToyTheta {
            mu: 0.0,
            omega: 1.0,
            sigma: 1.0,
        }
    }

    fn pack(&self, t: &ToyTheta) -> Vec<f64> {
        vec![t.mu, t.omega.ln(), t.sigma.ln()]
    }

    fn unpack(&self, x: &[f64], _t: &ToyTheta) -> ToyTheta {
        ToyTheta {
            mu: x[0],
            omega: x[1].exp(),
            sigma: x[2].exp(),
        }
    }

    fn named(&self, t: &ToyTheta) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("mu".into(), t.mu),
            ("omega".into(), t.omega),
            ("sigma".into(), t.sigma),
        ])
    }
}

pub fn toy_subject(id: &str, y: &[f64]) -> Subject {
    let obs = y
        .iter()
        .enumerate()
        .map(|(j, &value)| Observation {
            time: j as f64 + 1.0,
            value,
            channel: Channel::Y1Pk,
        })
        .collect();
    Subject::new(id, vec![], obs, Covariates::default())
}

/// Exact −2 log marginal of one subject: `y ~ N(mu·1, σ²I + ω²·11ᵀ)`.
pub fn toy_marginal_m2ll(t: &ToyTheta, y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.is_empty() {
        return 0.0;
    }
    let (s2, w2) = (t.sigma * t.sigma, t.omega * t.omega);
    let denom = s2 + n * w2;
    let log_det = (n - 1.0) * s2.ln() + denom.ln();
    let r: Vec<f64> = y.iter().map(|v| v - t.mu).collect();
    let sum: f64 = r.iter().sum();
    let ss: f64 = r.iter().map(|v| v * v).sum();
    let quad = (ss - w2 / denom * sum * sum) / s2;
    n * (2.0 * std::f64::consts::PI).ln() + log_det + quad
}

/// Exact posterior mean and variance of η.
pub fn toy_posterior(t: &ToyTheta, y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let prec = n / (t.sigma * t.sigma) + 1.0 / (t.omega * t.omega);
    let mean = y.iter().map(|v| v - t.mu).sum::<f64>() / (t.sigma * t.sigma) / prec;
    (mean, 1.0 / prec)
}
