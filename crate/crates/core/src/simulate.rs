//! Synthetic datasets drawn from a model with known population values.
//!
//! The default design mimics a single-dose oral anticoagulant study: a
//! weight-scaled dose at t = 0, concentrations sampled over five days and
//! responses over six.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Channel, Covariates, Dataset, DatasetError, DoseEvent, Observation, Sex, Subject};
use crate::model::{error_sd, individual_parameters, predict_subject, ModelError, ModelSpec, PkCurve, Theta};
use crate::seed;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid design: {0}")]
    InvalidDesign(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub n_subjects: usize,
    /// Dose per kg of body weight, given once at t = 0.
    pub dose_per_kg: f64,
    pub pk_times: Vec<f64>,
    pub pd_times: Vec<f64>,
    pub weight_mean: f64,
    pub weight_sd: f64,
    pub weight_min: f64,
    pub age_range: (f64, f64),
    pub seed: u64,
}

impl Default for SimulationDesign {
    fn default() -> Self {
        SimulationDesign {
            n_subjects: 32,
            dose_per_kg: 1.5,
            pk_times: vec![0.5, 1.0, 2.0, 3.0, 6.0, 9.0, 12.0, 24.0, 36.0, 48.0, 72.0, 96.0, 120.0],
            pd_times: vec![0.0, 24.0, 36.0, 48.0, 72.0, 96.0, 120.0, 144.0],
            weight_mean: 70.0,
            weight_sd: 12.0,
            weight_min: 40.0,
            age_range: (20.0, 60.0),
            seed: 1,
        }
    }
}

impl SimulationDesign {
    fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: &str| Err(SimulateError::InvalidDesign(m.into()));
        if self.n_subjects == 0 {
            return bad("need at least one subject");
        }
        if !(self.dose_per_kg > 0.0) {
            return bad("dose_per_kg must be positive");
        }
        if !(self.weight_sd >= 0.0) || !(self.weight_min > 0.0) {
            return bad("weight distribution must be positive");
        }
        if self.age_range.0 > self.age_range.1 || self.age_range.0 <= 0.0 {
            return bad("age range must be positive and ordered");
        }
        if self
            .pk_times
            .iter()
            .chain(&self.pd_times)
            .any(|t| !t.is_finite() || *t < 0.0)
        {
            return bad("sampling times must be finite and non-negative");
        }
        Ok(())
    }
}

fn draw_eta<R: Rng>(spec: &ModelSpec, theta: &Theta, rng: &mut R) -> Result<Vec<f64>, SimulateError> {
    let k = spec.n_eta();
    if k == 0 {
        return Ok(Vec::new());
    }
    let l = spec
        .omega_covariance(theta)
        .cholesky()
        .ok_or_else(|| SimulateError::InvalidDesign("omega is not positive definite".into()))?
        .l();
    let z = DVector::<f64>::from_fn(k, |_, _| rng.sample(StandardNormal));
    Ok((l * z).as_slice().to_vec())
}

/// Replace the placeholder values of `channel` with `f + g(f)·e`.
fn observe<R: Rng>(
    spec: &ModelSpec,
    theta: &Theta,
    subject: &mut Subject,
    driver: Option<&PkCurve>,
    eta: &[f64],
    rng: &mut R,
) -> Result<(), SimulateError> {
    let psi = individual_parameters(spec, theta, &subject.covariates, eta)?;
    let f = predict_subject(spec, &psi, subject, driver)?;
    let obs = subject.observations.iter_mut().filter(|o| o.channel == spec.channel);
    for (o, fj) in obs.zip(f) {
        let e: f64 = rng.sample(StandardNormal);
        o.value = fj + error_sd(fj, &theta.error)? * e;
    }
    Ok(())
}

fn simulate(
    pk: (&ModelSpec, &Theta),
    pd: Option<(&ModelSpec, &Theta)>,
    design: &SimulationDesign,
) -> Result<Dataset, SimulateError> {
    design.validate()?;
    if !pk.0.structural.is_pk() {
        return Err(SimulateError::InvalidDesign(format!(
            "`{}` is not a PK model",
            pk.0.label
        )));
    }
    if let Some((spec, _)) = pd {
        if spec.structural.is_pk() {
            return Err(SimulateError::InvalidDesign(format!(
                "`{}` is not a PD model",
                spec.label
            )));
        }
    }
    let weight =
        Normal::new(design.weight_mean, design.weight_sd).map_err(|e| SimulateError::InvalidDesign(e.to_string()))?;
    let mut subjects = Vec::with_capacity(design.n_subjects);
    for i in 0..design.n_subjects {
        let mut rng = seed::rng(seed::derive(design.seed, &[i as u64]));
        let wt = weight.sample(&mut rng).max(design.weight_min);
        let age = rng.random_range(design.age_range.0..=design.age_range.1);
        let sex = if rng.random_bool(0.5) { Sex::M } else { Sex::F };
        let placeholder = |times: &[f64], channel| -> Vec<Observation> {
            times
                .iter()
                .map(|&time| Observation {
                    time,
                    value: 0.0,
                    channel,
                })
                .collect()
        };
        let mut observations = placeholder(&design.pk_times, Channel::Y1Pk);
        if pd.is_some() {
            observations.extend(placeholder(&design.pd_times, Channel::Y2Pd));
        }
        let mut subject = Subject::new(
            (i + 1).to_string(),
            vec![DoseEvent {
                time: 0.0,
                amount: design.dose_per_kg * wt,
            }],
            observations,
            Covariates {
                weight: Some(wt),
                age: Some(age),
                sex,
            },
        );

        let (pk_spec, pk_theta) = pk;
        let pk_eta = draw_eta(pk_spec, pk_theta, &mut rng)?;
        observe(pk_spec, pk_theta, &mut subject, None, &pk_eta, &mut rng)?;
        if let Some((pd_spec, pd_theta)) = pd {
            let psi = individual_parameters(pk_spec, pk_theta, &subject.covariates, &pk_eta)?;
            let driver = PkCurve::from_individual(pk_spec, &psi, &subject)?;
            let pd_eta = draw_eta(pd_spec, pd_theta, &mut rng)?;
            observe(pd_spec, pd_theta, &mut subject, Some(&driver), &pd_eta, &mut rng)?;
        }
        subjects.push(subject);
    }
    Ok(Dataset::new(
        subjects,
        format!("simulated:{}:seed={}", pk.0.label, design.seed),
    )?)
}

/// Concentrations only.
pub fn simulate_pk(spec: &ModelSpec, theta: &Theta, design: &SimulationDesign) -> Result<Dataset, SimulateError> {
    simulate((spec, theta), None, design)
}

/// Concentrations and responses, the PD model driven by each subject's true
/// individual PK curve.
pub fn simulate_pkpd(
    pk_spec: &ModelSpec,
    pk_theta: &Theta,
    pd_spec: &ModelSpec,
    pd_theta: &Theta,
    design: &SimulationDesign,
) -> Result<Dataset, SimulateError> {
    simulate((pk_spec, pk_theta), Some((pd_spec, pd_theta)), design)
}
