//! Helpers shared by the integration and acceptance targets.

#![allow(dead_code)]

use std::collections::BTreeMap;

use bscv::dataset::{Channel, Covariates, Dataset, Observation, Subject};
use bscv::estimate::PopulationModel;
use bscv::model::{ModelError, ModelSpec};
use nalgebra::DMatrix;

/// Random-intercept Gaussian model `y_j = mu + eta + sigma·e_j`,
/// `eta ~ N(0, omega²)`, whose marginal likelihood is known exactly.
pub struct Intercept;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterceptTheta {
    pub mu: f64,
    pub omega: f64,
    pub sigma: f64,
}

impl PopulationModel for Intercept {
    type Theta = InterceptTheta;

    fn n_eta(&self) -> usize {
        1
    }

    fn p_count(&self) -> usize {
        3
    }

    fn observations(&self, subject: &Subject) -> Vec<f64> {
        subject.channel_values(Channel::Y1Pk)
    }

    fn predict(&self, t: &InterceptTheta, subject: &Subject, eta: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(vec![t.mu + eta[0]; subject.n_obs(Channel::Y1Pk)])
    }

    fn error_sd(&self, t: &InterceptTheta, _f: f64) -> Result<f64, ModelError> {
        Ok(t.sigma)
    }

    fn error_sd_slope(&self, _t: &InterceptTheta, _f: f64) -> f64 {
        0.0
    }

    fn omega(&self, t: &InterceptTheta) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, t.omega * t.omega)
    }

    fn initial_theta(&self, _d: &Dataset) -> InterceptTheta {
        InterceptTheta {
            mu: 0.0,
            omega: 1.0,
            sigma: 1.0,
        }
    }

    fn pack(&self, t: &InterceptTheta) -> Vec<f64> {
        vec![t.mu, t.omega.ln(), t.sigma.ln()]
    }

    fn unpack(&self, x: &[f64], _t: &InterceptTheta) -> InterceptTheta {
        InterceptTheta {
            mu: x[0],
            omega: x[1].exp(),
            sigma: x[2].exp(),
        }
    }

    fn named(&self, t: &InterceptTheta) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("mu".into(), t.mu),
            ("omega".into(), t.omega),
            ("sigma".into(), t.sigma),
        ])
    }
}

pub fn intercept_subject(id: &str, y: &[f64]) -> Subject {
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

/// Exact −2 log marginal via a dense Cholesky of `σ²I + ω²·11ᵀ`.
pub fn intercept_m2ll(t: &InterceptTheta, y: &[f64]) -> f64 {
    let n = y.len();
    let cov = DMatrix::from_fn(n, n, |i, j| {
        t.omega * t.omega + if i == j { t.sigma * t.sigma } else { 0.0 }
    });
    let chol = cov.cholesky().expect("positive definite");
    let r = nalgebra::DVector::from_iterator(n, y.iter().map(|v| v - t.mu));
    let z = chol.solve(&r);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + r.dot(&z)
}

/// One-compartment model with combined additive/proportional error.
pub const ONE_CMT: &str = r#"
label = "one_cmt"
[structural]
model = "one_compartment"
[error]
form = "combined1"
a = 0.2
b = 0.1
[parameters]
ka = { pop = 1.0 }
V = { pop = 8.0 }
Cl = { pop = 0.13 }
[omega]
sd = { ka = 0.4, V = 0.2, Cl = 0.25 }
"#;

pub fn one_cmt() -> ModelSpec {
    ModelSpec::from_toml_str(ONE_CMT).expect("valid spec")
}

/// The same model with the error exponent estimated.
pub fn one_cmt_with_exponent() -> ModelSpec {
    let mut spec = one_cmt();
    spec.label = "one_cmt_c".into();
    spec.error = spec.error.with_exponent(1.0);
    spec
}

pub fn models_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("models/warfarin")
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}
