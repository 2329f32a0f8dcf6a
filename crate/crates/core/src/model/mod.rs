//! Structural PK/PD models, residual error models and the individual
//! parameter model.

pub mod irm;
pub mod ode;
pub mod pk;
pub mod residual;
pub mod spec;

use thiserror::Error;

pub use irm::{irm_derivative, solve_irm, IrmParams, IrmVariant};
pub use pk::{
    pk_one_compartment, pk_two_compartment_conc, pk_two_compartment_macro, MacroConstants, Pk1Params, Pk2Params,
    PkModel,
};
pub use residual::{error_sd, ErrorForm, ErrorSpec};
pub use spec::{
    individual_parameters, irm_params, logistic, logit, pk_model, predict_subject, CorrelationBlock, CovariateEffect,
    CovariateTransform, ModelSpec, OmegaSpec, ParameterSpec, PkCurve, Structural, Theta,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid value {value} for parameter `{name}`")]
    InvalidParameter { name: String, value: f64 },
    #[error("parameter `{0}` is required but missing")]
    MissingParameter(String),
    #[error("parameter `{0}` is not part of this structural model")]
    UnknownParameter(String),
    #[error("absorption rate {ka} collides with disposition rate {rate}")]
    DegenerateRates { ka: f64, rate: f64 },
    #[error("output times must be sorted ascending")]
    UnsortedTimes,
    #[error("ODE step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },
    #[error("ODE state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("residual SD {sd} is not positive at prediction {f}")]
    NonPositiveSd { f: f64, sd: f64 },
    #[error("invalid error model: {0}")]
    InvalidErrorModel(String),
    #[error("parameter `{parameter}` needs covariate `{covariate}` which the subject lacks")]
    MissingCovariate { parameter: String, covariate: String },
    #[error("expected {expected} random effects, got {got}")]
    EtaDimension { expected: usize, got: usize },
    #[error("PD prediction requires a concentration driver")]
    MissingDriver,
    #[error("subject `{0}` has no doses")]
    NoDoses(String),
    #[error("model configuration: {0}")]
    Config(String),
}
