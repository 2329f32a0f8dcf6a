//! Sequential PK→PD: freeze each subject's individual PK curve from a PK fit
//! and use it as the concentration input of the PD model.

use std::collections::BTreeMap;

use super::{EstimateError, FitResult, Result};
use crate::dataset::Dataset;
use crate::model::{individual_parameters, ModelSpec, PkCurve, Theta};

/// Concentration drivers keyed by the subject's origin id, so bootstrap
/// copies share their source subject's curve.
pub type Drivers = BTreeMap<String, PkCurve>;

/// Build drivers for every subject of `dataset` from PK population values and
/// per-subject EBEs (keyed by origin id).
pub fn drivers_from_ebes(
    pk_spec: &ModelSpec,
    theta: &Theta,
    ebes: &BTreeMap<String, Vec<f64>>,
    dataset: &Dataset,
) -> Result<Drivers> {
    let mut drivers = Drivers::new();
    for subject in dataset.subjects() {
        if drivers.contains_key(&subject.origin) {
            continue;
        }
        let eta = ebes
            .get(&subject.origin)
            .ok_or_else(|| EstimateError::MissingSubjectEbes(subject.origin.clone()))?;
        let psi = individual_parameters(pk_spec, theta, &subject.covariates, eta)?;
        drivers.insert(
            subject.origin.clone(),
            PkCurve::from_individual(pk_spec, &psi, subject)?,
        );
    }
    Ok(drivers)
}

/// Drivers from a converged PK fit.
pub fn sequential_pd_prepare(pk_fit: &FitResult<Theta>, pk_spec: &ModelSpec, dataset: &Dataset) -> Result<Drivers> {
    pk_fit.require_converged()?;
    drivers_from_ebes(pk_spec, &pk_fit.theta_hat, &pk_fit.ebes, dataset)
}
