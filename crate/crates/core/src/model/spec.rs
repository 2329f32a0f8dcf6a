//! Model specifications: structural model, residual error, and the lognormal
//! individual-parameter model with covariate effects and correlated random
//! effects.
//!
//! Specs are written as TOML:
//!
//! ```toml
//! label = "pk05"
//! channel = "pk"
//!
//! [structural]
//! model = "one_compartment"
//!
//! [error]
//! form = "combined1"
//! a = 0.3
//! b = 0.1
//!
//! [covariates]
//! LnWt70 = { covariate = "weight", reference = 70.0 }
//!
//! [parameters]
//! tlag = { pop = 0.8 }
//! ka = { pop = 1.0 }
//! V = { pop = 8.0, covariates = { LnWt70 = 1.0 } }
//! Cl = { pop = 0.13, covariates = { LnWt70 = 0.75 } }
//!
//! [omega]
//! sd = { ka = 0.5 }
//! correlations = [{ parameters = ["Cl", "V"], coefficients = [0.0] }]
//! ```

use std::collections::{BTreeMap, HashSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::irm::{solve_irm, IrmParams, IrmVariant};
use super::pk::{Pk1Params, Pk2Params, PkModel};
use super::residual::{ErrorForm, ErrorSpec};
use super::ModelError;
use crate::dataset::{transform_covariate, Channel, CovariateKind, Covariates, DoseEvent, Subject};

pub const DEFAULT_OMEGA_SD: f64 = 0.3;
pub const IRM_RTOL: f64 = 1e-8;
pub const IRM_ATOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structural {
    OneCompartment,
    TwoCompartment,
    Irm(IrmVariant),
}

impl Structural {
    /// Required and optional parameter names, in canonical order.
    fn parameter_names(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Structural::OneCompartment => (&["ka", "V", "Cl"], &["tlag"]),
            Structural::TwoCompartment => (&["ka", "Cl", "V1", "Q", "V2"], &["tlag"]),
            Structural::Irm(IrmVariant::InhibitInput) => (&["R0", "kout", "Imax", "IC50"], &["gamma_i"]),
            Structural::Irm(IrmVariant::StimulateOutput) => (&["R0", "kout", "Emax", "EC50"], &["gamma_e"]),
            Structural::Irm(IrmVariant::InhibitInputFullImax) => (&["R0", "kout", "IC50"], &["gamma_i"]),
            Structural::Irm(IrmVariant::Combined) => {
                (&["R0", "kout", "Imax", "IC50", "Emax", "EC50"], &["gamma_i", "gamma_e"])
            }
        }
    }

    fn canonical_order(self) -> Vec<&'static str> {
        let (req, opt) = self.parameter_names();
        // tlag first mirrors how the PK tables list it.
        let mut names: Vec<&str> = opt.iter().copied().filter(|n| *n == "tlag").collect();
        names.extend(req.iter().copied());
        names.extend(opt.iter().copied().filter(|n| *n != "tlag"));
        names
    }

    pub fn is_pk(self) -> bool {
        !matches!(self, Structural::Irm(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTransform {
    pub name: String,
    pub covariate: CovariateKind,
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateEffect {
    /// Name of a [`CovariateTransform`].
    pub transform: String,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub pop_value: f64,
    pub fixed: bool,
    pub covariate_effects: Vec<CovariateEffect>,
    pub has_random_effect: bool,
}

impl ParameterSpec {
    /// Bounded by 1 (`Imax`): logit-normal rather than lognormal.
    pub fn is_fraction(&self) -> bool {
        self.name == "Imax"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBlock {
    pub parameters: Vec<String>,
    /// Strict lower triangle, row-major: (1,0), (2,0), (2,1), ...
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaSpec {
    /// Log-scale standard deviation of each random effect, keyed by parameter.
    pub sd_per_parameter: BTreeMap<String, f64>,
    pub correlation_blocks: Vec<CorrelationBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub label: String,
    pub structural: Structural,
    pub error: ErrorSpec,
    pub parameters: Vec<ParameterSpec>,
    pub omega: OmegaSpec,
    pub channel: Channel,
    pub covariates: Vec<CovariateTransform>,
}

/// Current values of every population-level scalar of a [`ModelSpec`],
/// fixed or estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    /// Typical values, aligned with `spec.parameters`.
    pub pop: Vec<f64>,
    /// Covariate coefficients, aligned with each parameter's effects.
    pub betas: Vec<Vec<f64>>,
    /// Random-effect SDs, aligned with [`ModelSpec::eta_parameters`].
    pub omega_sd: Vec<f64>,
    /// Correlation coefficients per block.
    pub correlations: Vec<Vec<f64>>,
    pub error: ErrorSpec,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let (required, optional) = self.structural.parameter_names();
        let mut seen = HashSet::new();
        for p in &self.parameters {
            if !required.contains(&p.name.as_str()) && !optional.contains(&p.name.as_str()) {
                return Err(ModelError::UnknownParameter(p.name.clone()));
            }
            if !seen.insert(p.name.as_str()) {
                return Err(ModelError::Config(format!("parameter `{}` listed twice", p.name)));
            }
            if !(p.pop_value > 0.0 && p.pop_value.is_finite()) || (p.is_fraction() && p.pop_value > 1.0) {
                return Err(ModelError::InvalidParameter {
                    name: p.name.clone(),
                    value: p.pop_value,
                });
            }
            for e in &p.covariate_effects {
                if self.transform(&e.transform).is_none() {
                    return Err(ModelError::Config(format!(
                        "parameter `{}` references undeclared covariate transform `{}`",
                        p.name, e.transform
                    )));
                }
            }
        }
        for r in required {
            if !seen.contains(r) {
                return Err(ModelError::MissingParameter(r.to_string()));
            }
        }
        if self.structural.is_pk() != (self.channel == Channel::Y1Pk) {
            return Err(ModelError::Config(format!(
                "structural model {:?} does not match channel {}",
                self.structural, self.channel
            )));
        }
        for t in &self.covariates {
            if !(t.reference > 0.0) {
                return Err(ModelError::Config(format!(
                    "covariate `{}` needs a positive reference",
                    t.name
                )));
            }
        }
        self.error.validate()?;

        let etas = self.eta_parameters();
        let sd_keys: Vec<&str> = self.omega.sd_per_parameter.keys().map(String::as_str).collect();
        let mut eta_sorted = etas.clone();
        eta_sorted.sort_unstable();
        if sd_keys != eta_sorted {
            return Err(ModelError::Config(format!(
                "omega SDs {sd_keys:?} must match the random-effect parameters {eta_sorted:?}"
            )));
        }
        if self
            .omega
            .sd_per_parameter
            .values()
            .any(|&s| !(s > 0.0 && s.is_finite()))
        {
            return Err(ModelError::Config("omega SDs must be positive".into()));
        }
        let mut in_block = HashSet::new();
        for b in &self.omega.correlation_blocks {
            let m = b.parameters.len();
            if m < 2 || b.coefficients.len() != m * (m - 1) / 2 {
                return Err(ModelError::Config(format!(
                    "correlation block {:?} needs {} coefficients",
                    b.parameters,
                    m * m.saturating_sub(1) / 2
                )));
            }
            for name in &b.parameters {
                if !etas.contains(&name.as_str()) {
                    return Err(ModelError::Config(format!(
                        "correlated parameter `{name}` has no random effect"
                    )));
                }
                if !in_block.insert(name.as_str()) {
                    return Err(ModelError::Config(format!(
                        "parameter `{name}` appears in two correlation blocks"
                    )));
                }
            }
        }
        let theta = self.initial_theta();
        self.omega_covariance(&theta)
            .cholesky()
            .ok_or_else(|| ModelError::Config("omega is not positive definite".into()))?;
        if self.p_count() == 0 {
            return Err(ModelError::Config("model has nothing to estimate".into()));
        }
        Ok(())
    }

    pub fn transform(&self, name: &str) -> Option<&CovariateTransform> {
        self.covariates.iter().find(|t| t.name == name)
    }

    pub fn parameter_index(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|p| p.name == name)
    }

    /// Names of parameters carrying a random effect, in η order.
    pub fn eta_parameters(&self) -> Vec<&str> {
        self.parameters
            .iter()
            .filter(|p| p.has_random_effect)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn n_eta(&self) -> usize {
        self.parameters.iter().filter(|p| p.has_random_effect).count()
    }

    /// Number of estimated scalars: free typical values, covariate
    /// coefficients, omega SDs, correlation coefficients, error parameters.
    pub fn p_count(&self) -> usize {
        let pop = self.parameters.iter().filter(|p| !p.fixed).count();
        let betas: usize = self.parameters.iter().map(|p| p.covariate_effects.len()).sum();
        let corr: usize = self.omega.correlation_blocks.iter().map(|b| b.coefficients.len()).sum();
        pop + betas + self.n_eta() + corr + self.error.n_estimated()
    }

    pub fn initial_theta(&self) -> Theta {
        Theta {
            pop: self.parameters.iter().map(|p| p.pop_value).collect(),
            betas: self
                .parameters
                .iter()
                .map(|p| p.covariate_effects.iter().map(|e| e.beta).collect())
                .collect(),
            omega_sd: self
                .eta_parameters()
                .iter()
                .map(|n| self.omega.sd_per_parameter[*n])
                .collect(),
            correlations: self
                .omega
                .correlation_blocks
                .iter()
                .map(|b| b.coefficients.clone())
                .collect(),
            error: self.error,
        }
    }

    /// Ω = D·R·D with D the SD diagonal and R the block correlation matrix.
    pub fn omega_covariance(&self, theta: &Theta) -> DMatrix<f64> {
        let etas = self.eta_parameters();
        let k = etas.len();
        let mut r = DMatrix::<f64>::identity(k, k);
        for (block, coefs) in self.omega.correlation_blocks.iter().zip(&theta.correlations) {
            let idx: Vec<usize> = block
                .parameters
                .iter()
                .map(|n| etas.iter().position(|e| e == n).expect("validated block member"))
                .collect();
            let mut c = 0;
            for i in 1..idx.len() {
                for j in 0..i {
                    r[(idx[i], idx[j])] = coefs[c];
                    r[(idx[j], idx[i])] = coefs[c];
                    c += 1;
                }
            }
        }
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&theta.omega_sd));
        &d * r * &d
    }

    pub fn from_toml_str(text: &str) -> Result<ModelSpec, ModelError> {
        let raw: RawSpec = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        raw.into_spec()
    }

    pub fn from_toml_file(path: &std::path::Path) -> Result<ModelSpec, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        ModelSpec::from_toml_str(&text)
    }
}

impl Theta {
    /// Every scalar keyed by a stable name, e.g. `Cl`, `beta_Cl_LnWt70`,
    /// `omega_Cl`, `corr_V_Cl`, `a`.
    pub fn to_named(&self, spec: &ModelSpec) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (i, p) in spec.parameters.iter().enumerate() {
            out.insert(p.name.clone(), self.pop[i]);
            for (e, b) in p.covariate_effects.iter().zip(&self.betas[i]) {
                out.insert(format!("beta_{}_{}", p.name, e.transform), *b);
            }
        }
        for (name, sd) in spec.eta_parameters().iter().zip(&self.omega_sd) {
            out.insert(format!("omega_{name}"), *sd);
        }
        for (block, coefs) in spec.omega.correlation_blocks.iter().zip(&self.correlations) {
            let mut c = 0;
            for i in 1..block.parameters.len() {
                for j in 0..i {
                    out.insert(
                        format!("corr_{}_{}", block.parameters[i], block.parameters[j]),
                        coefs[c],
                    );
                    c += 1;
                }
            }
        }
        out.insert("a".into(), self.error.a);
        out.insert("b".into(), self.error.b);
        out.insert("c".into(), self.error.c);
        out
    }

    pub fn from_named(spec: &ModelSpec, named: &BTreeMap<String, f64>) -> Result<Theta, ModelError> {
        let get = |k: &str| {
            named
                .get(k)
                .copied()
                .ok_or_else(|| ModelError::MissingParameter(k.to_string()))
        };
        let mut theta = spec.initial_theta();
        for (i, p) in spec.parameters.iter().enumerate() {
            theta.pop[i] = get(&p.name)?;
            for (j, e) in p.covariate_effects.iter().enumerate() {
                theta.betas[i][j] = get(&format!("beta_{}_{}", p.name, e.transform))?;
            }
        }
        for (k, name) in spec.eta_parameters().iter().enumerate() {
            theta.omega_sd[k] = get(&format!("omega_{name}"))?;
        }
        for (b, block) in spec.omega.correlation_blocks.iter().enumerate() {
            let mut c = 0;
            for i in 1..block.parameters.len() {
                for j in 0..i {
                    theta.correlations[b][c] = get(&format!("corr_{}_{}", block.parameters[i], block.parameters[j]))?;
                    c += 1;
                }
            }
        }
        theta.error.a = get("a")?;
        theta.error.b = get("b")?;
        theta.error.c = get("c")?;
        Ok(theta)
    }
}

/// Individual parameter values `exp(log(pop) + Σ β·cov + η)`, aligned with
/// `spec.parameters`. Parameters without a random effect use η = 0.
/// Fractions ([`ParameterSpec::is_fraction`]) use the logit scale instead.
pub fn individual_parameters(
    spec: &ModelSpec,
    theta: &Theta,
    covariates: &Covariates,
    eta: &[f64],
) -> Result<Vec<f64>, ModelError> {
    let k = spec.n_eta();
    if eta.len() != k {
        return Err(ModelError::EtaDimension {
            expected: k,
            got: eta.len(),
        });
    }
    let mut next_eta = 0;
    let mut out = Vec::with_capacity(spec.parameters.len());
    for (i, p) in spec.parameters.iter().enumerate() {
        let mut log_shift = 0.0;
        for (e, beta) in p.covariate_effects.iter().zip(&theta.betas[i]) {
            let t = spec
                .transform(&e.transform)
                .ok_or_else(|| ModelError::Config(format!("undeclared covariate transform `{}`", e.transform)))?;
            let value = covariates
                .get(t.covariate)
                .ok_or_else(|| ModelError::MissingCovariate {
                    parameter: p.name.clone(),
                    covariate: t.name.clone(),
                })?;
            let x = transform_covariate(value, t.reference).map_err(|_| ModelError::MissingCovariate {
                parameter: p.name.clone(),
                covariate: t.name.clone(),
            })?;
            log_shift += beta * x;
        }
        if p.has_random_effect {
            log_shift += eta[next_eta];
            next_eta += 1;
        }
        out.push(if p.is_fraction() {
            logistic(logit(theta.pop[i]) + log_shift)
        } else {
            theta.pop[i] * log_shift.exp()
        });
    }
    Ok(out)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn value_of(spec: &ModelSpec, psi: &[f64], name: &str) -> Option<f64> {
    spec.parameter_index(name).map(|i| psi[i])
}

fn require(spec: &ModelSpec, psi: &[f64], name: &str) -> Result<f64, ModelError> {
    value_of(spec, psi, name).ok_or_else(|| ModelError::MissingParameter(name.to_string()))
}

/// Structural PK model at the individual parameters `psi`.
pub fn pk_model(spec: &ModelSpec, psi: &[f64]) -> Result<PkModel, ModelError> {
    let tlag = value_of(spec, psi, "tlag").unwrap_or(0.0);
    match spec.structural {
        Structural::OneCompartment => Ok(PkModel::OneCompartment(Pk1Params {
            ka: require(spec, psi, "ka")?,
            v: require(spec, psi, "V")?,
            cl: require(spec, psi, "Cl")?,
            tlag,
        })),
        Structural::TwoCompartment => PkModel::two_compartment(Pk2Params {
            ka: require(spec, psi, "ka")?,
            cl: require(spec, psi, "Cl")?,
            v1: require(spec, psi, "V1")?,
            q: require(spec, psi, "Q")?,
            v2: require(spec, psi, "V2")?,
            tlag,
        }),
        Structural::Irm(_) => Err(ModelError::Config("not a PK model".into())),
    }
}

pub fn irm_params(spec: &ModelSpec, psi: &[f64]) -> Result<IrmParams, ModelError> {
    Ok(IrmParams {
        r0: require(spec, psi, "R0")?,
        kout: require(spec, psi, "kout")?,
        imax: value_of(spec, psi, "Imax"),
        ic50: value_of(spec, psi, "IC50"),
        emax: value_of(spec, psi, "Emax"),
        ec50: value_of(spec, psi, "EC50"),
        gamma_i: value_of(spec, psi, "gamma_i").unwrap_or(1.0),
        gamma_e: value_of(spec, psi, "gamma_e").unwrap_or(1.0),
    })
}

/// A subject's frozen individual concentration curve, used to drive PD models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PkCurve {
    pub model: PkModel,
    pub doses: Vec<DoseEvent>,
}

impl PkCurve {
    pub fn new(model: PkModel, doses: Vec<DoseEvent>) -> Self {
        PkCurve { model, doses }
    }

    pub fn from_individual(spec: &ModelSpec, psi: &[f64], subject: &Subject) -> Result<Self, ModelError> {
        Ok(PkCurve::new(pk_model(spec, psi)?, subject.doses.clone()))
    }

    /// Superposition over doses.
    pub fn conc(&self, t: f64) -> f64 {
        self.doses
            .iter()
            .filter(|d| t > d.time)
            .map(|d| self.model.single_dose(t - d.time, d.amount))
            .sum()
    }
}

/// Model predictions at the subject's observation times on `spec.channel`.
pub fn predict_subject(
    spec: &ModelSpec,
    psi: &[f64],
    subject: &Subject,
    driver: Option<&PkCurve>,
) -> Result<Vec<f64>, ModelError> {
    let times = subject.channel_times(spec.channel);
    match spec.structural {
        Structural::OneCompartment | Structural::TwoCompartment => {
            if subject.doses.is_empty() {
                return Err(ModelError::NoDoses(subject.id.clone()));
            }
            let curve = PkCurve::from_individual(spec, psi, subject)?;
            Ok(times.iter().map(|&t| curve.conc(t)).collect())
        }
        Structural::Irm(variant) => {
            let driver = driver.ok_or(ModelError::MissingDriver)?;
            if times.is_empty() {
                return Ok(Vec::new());
            }
            let p = irm_params(spec, psi)?;
            solve_irm(|t| driver.conc(t), &p, variant, &times, IRM_RTOL, IRM_ATOL)
        }
    }
}

// ---------------------------------------------------------------------------
// TOML layout

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    label: String,
    channel: Option<Channel>,
    structural: RawStructural,
    error: RawError,
    #[serde(default)]
    covariates: BTreeMap<String, RawCovariate>,
    parameters: BTreeMap<String, RawParameter>,
    #[serde(default)]
    omega: RawOmega,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStructural {
    model: String,
    variant: Option<IrmVariant>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawError {
    form: ErrorForm,
    a: Option<f64>,
    b: Option<f64>,
    c: Option<f64>,
    estimate_a: Option<bool>,
    estimate_b: Option<bool>,
    estimate_c: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCovariate {
    covariate: CovariateKind,
    reference: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParameter {
    pop: f64,
    #[serde(default)]
    fixed: bool,
    random_effect: Option<bool>,
    #[serde(default)]
    covariates: BTreeMap<String, f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOmega {
    #[serde(default)]
    sd: BTreeMap<String, f64>,
    #[serde(default)]
    correlations: Vec<RawCorrelation>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCorrelation {
    parameters: Vec<String>,
    coefficients: Option<Vec<f64>>,
}

impl RawSpec {
    fn into_spec(self) -> Result<ModelSpec, ModelError> {
        let structural = match (self.structural.model.as_str(), self.structural.variant) {
            ("one_compartment", None) => Structural::OneCompartment,
            ("two_compartment", None) => Structural::TwoCompartment,
            ("irm", Some(v)) => Structural::Irm(v),
            ("irm", None) => return Err(ModelError::Config("irm models need `variant`".into())),
            (other, _) => return Err(ModelError::Config(format!("unknown structural model `{other}`"))),
        };
        let channel = self.channel.unwrap_or(if structural.is_pk() {
            Channel::Y1Pk
        } else {
            Channel::Y2Pd
        });

        let canonical = structural.canonical_order();
        let resolve = |name: &str| -> Result<&'static str, ModelError> {
            canonical
                .iter()
                .copied()
                .find(|c| c.eq_ignore_ascii_case(name))
                .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))
        };

        let mut raw_params: Vec<(&'static str, RawParameter)> = Vec::new();
        for (name, p) in self.parameters {
            raw_params.push((resolve(&name)?, p));
        }
        raw_params.sort_by_key(|(n, _)| canonical.iter().position(|c| c == n));

        let mut omega_sd = BTreeMap::new();
        let mut explicit_sd = BTreeMap::new();
        for (name, sd) in self.omega.sd {
            explicit_sd.insert(resolve(&name)?, sd);
        }
        let mut parameters = Vec::new();
        for (name, p) in raw_params {
            let has_random_effect = p.random_effect.unwrap_or(true);
            if has_random_effect {
                omega_sd.insert(name.to_string(), explicit_sd.remove(name).unwrap_or(DEFAULT_OMEGA_SD));
            }
            parameters.push(ParameterSpec {
                name: name.to_string(),
                pop_value: p.pop,
                fixed: p.fixed,
                covariate_effects: p
                    .covariates
                    .into_iter()
                    .map(|(transform, beta)| CovariateEffect { transform, beta })
                    .collect(),
                has_random_effect,
            });
        }
        if let Some((name, _)) = explicit_sd.into_iter().next() {
            return Err(ModelError::Config(format!(
                "omega SD given for `{name}` which has no random effect"
            )));
        }

        let mut blocks = Vec::new();
        for c in self.omega.correlations {
            let names = c
                .parameters
                .iter()
                .map(|n| resolve(n).map(str::to_string))
                .collect::<Result<Vec<_>, _>>()?;
            let m = names.len();
            blocks.push(CorrelationBlock {
                coefficients: c.coefficients.unwrap_or_else(|| vec![0.0; m * m.saturating_sub(1) / 2]),
                parameters: names,
            });
        }

        let e = self.error;
        let error = ErrorSpec {
            form: e.form,
            a: e.a.unwrap_or(1.0),
            b: e.b.unwrap_or(0.1),
            c: e.c.unwrap_or(1.0),
            estimate_a: e.estimate_a.unwrap_or(true),
            estimate_b: e.estimate_b.unwrap_or(true),
            estimate_c: e.estimate_c.unwrap_or(false),
        };

        let spec = ModelSpec {
            label: self.label,
            structural,
            error,
            parameters,
            omega: OmegaSpec {
                sd_per_parameter: omega_sd,
                correlation_blocks: blocks,
            },
            channel,
            covariates: self
                .covariates
                .into_iter()
                .map(|(name, c)| CovariateTransform {
                    name,
                    covariate: c.covariate,
                    reference: c.reference,
                })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Observation, Sex};
    use crate::model::pk::pk_one_compartment;
    use proptest::prelude::*;

    const PK5: &str = r#"
        label = "pk05"
        [structural]
        model = "one_compartment"
        [error]
        form = "combined1"
        a = 0.3
        b = 0.1
        [covariates]
        LnWt70 = { covariate = "weight", reference = 70.0 }
        [parameters]
        tlag = { pop = 0.8 }
        ka = { pop = 1.0 }
        V = { pop = 8.0, covariates = { LnWt70 = 1.0 } }
        Cl = { pop = 0.13, covariates = { LnWt70 = 0.75 } }
        [omega]
        sd = { ka = 0.5 }
        correlations = [{ parameters = ["Cl", "V"], coefficients = [0.2] }]
    "#;

    fn covs(weight: f64) -> Covariates {
        Covariates {
            weight: Some(weight),
            age: Some(31.0),
            sex: Sex::M,
        }
    }

    #[test]
    fn parses_table_model() {
        let spec = ModelSpec::from_toml_str(PK5).unwrap();
        let names: Vec<&str> = spec.parameters.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["tlag", "ka", "V", "Cl"]);
        assert_eq!(spec.channel, Channel::Y1Pk);
        assert_eq!(spec.omega.sd_per_parameter["ka"], 0.5);
        assert_eq!(spec.omega.sd_per_parameter["V"], DEFAULT_OMEGA_SD);
        // 4 pop + 2 betas + 4 omega + 1 corr + 2 error
        assert_eq!(spec.p_count(), 13);
        let omega = spec.omega_covariance(&spec.initial_theta());
        assert!((omega[(3, 2)] - 0.2 * 0.3 * 0.3).abs() < 1e-15);
        assert_eq!(omega[(0, 1)], 0.0);
    }

    #[test]
    fn fixed_parameters_do_not_count() {
        let text = PK5.replace(
            "tlag = { pop = 0.8 }",
            "tlag = { pop = 0.8, fixed = true, random_effect = false }",
        );
        let spec = ModelSpec::from_toml_str(&text).unwrap();
        assert_eq!(spec.p_count(), 11);
    }

    #[test]
    fn rejects_unknown_and_missing_parameters() {
        let bad = PK5.replace("ka = { pop = 1.0 }", "kz = { pop = 1.0 }");
        assert!(matches!(
            ModelSpec::from_toml_str(&bad),
            Err(ModelError::UnknownParameter(_))
        ));
        let missing = PK5.replace("ka = { pop = 1.0 }", "").replace("sd = { ka = 0.5 }", "");
        assert!(matches!(
            ModelSpec::from_toml_str(&missing),
            Err(ModelError::MissingParameter(_))
        ));
    }

    #[test]
    fn rejects_non_positive_definite_omega() {
        let bad = PK5.replace("coefficients = [0.2]", "coefficients = [1.5]");
        assert!(ModelSpec::from_toml_str(&bad).is_err());
    }

    #[test]
    fn irm_model_parses() {
        let text = r#"
            label = "pd01"
            [structural]
            model = "irm"
            variant = "inhibit_input"
            [error]
            form = "combined1"
            [parameters]
            R0 = { pop = 100.0 }
            kout = { pop = 0.05 }
            Imax = { pop = 0.9 }
            IC50 = { pop = 1.0 }
        "#;
        let spec = ModelSpec::from_toml_str(text).unwrap();
        assert_eq!(spec.channel, Channel::Y2Pd);
        assert_eq!(spec.p_count(), 4 + 4 + 2);
    }

    #[test]
    fn individual_parameters_identity_and_covariates() {
        let spec = ModelSpec::from_toml_str(PK5).unwrap();
        let theta = spec.initial_theta();
        let psi = individual_parameters(&spec, &theta, &covs(70.0), &[0.0; 4]).unwrap();
        assert_eq!(psi, vec![0.8, 1.0, 8.0, 0.13]);

        let psi = individual_parameters(&spec, &theta, &covs(140.0), &[0.0, std::f64::consts::LN_2, 0.0, 0.0]).unwrap();
        assert!((psi[1] - 2.0).abs() < 1e-6);
        assert!((psi[2] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn hill_covariate_power_law() {
        let text = r#"
            label = "pd02"
            [structural]
            model = "irm"
            variant = "inhibit_input"
            [error]
            form = "combined1"
            [covariates]
            LnWt70 = { covariate = "weight", reference = 70.0 }
            [parameters]
            R0 = { pop = 100.0 }
            kout = { pop = 0.05 }
            Imax = { pop = 0.9 }
            IC50 = { pop = 1.0 }
            gamma_i = { pop = 2.0, covariates = { LnWt70 = 1.0 } }
        "#;
        let spec = ModelSpec::from_toml_str(text).unwrap();
        let psi = individual_parameters(&spec, &spec.initial_theta(), &covs(140.0), &[0.0; 5]).unwrap();
        let h = psi[spec.parameter_index("gamma_i").unwrap()];
        assert!((h - 4.0).abs() < 1e-12);

        // Imax is logit-normal: typical value at η = 0, always below 1.
        let imax = spec.parameter_index("Imax").unwrap();
        let eta_index = spec.eta_parameters().iter().position(|n| *n == "Imax").unwrap();
        for e in [-5.0, -0.5, 0.0, 0.5, 5.0, 50.0] {
            let mut eta = [0.0; 5];
            eta[eta_index] = e;
            let v = individual_parameters(&spec, &spec.initial_theta(), &covs(70.0), &eta).unwrap()[imax];
            assert!(v > 0.0 && v <= 1.0);
            let expected = 1.0 / (1.0 + (-(9.0f64.ln() + e)).exp());
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_and_logistic_are_inverse() {
        for p in [1e-6, 0.1, 0.5, 0.9, 0.999_999] {
            assert!((logistic(logit(p)) - p).abs() < 1e-12);
        }
        assert_eq!(logistic(-800.0), 0.0);
        assert_eq!(logistic(800.0), 1.0);
    }

    #[test]
    fn fraction_above_one_is_rejected() {
        let text = r#"
            label = "bad"
            [structural]
            model = "irm"
            variant = "inhibit_input"
            [error]
            form = "combined1"
            [parameters]
            R0 = { pop = 100.0 }
            kout = { pop = 0.05 }
            Imax = { pop = 1.2 }
            IC50 = { pop = 1.0 }
        "#;
        assert!(ModelSpec::from_toml_str(text).is_err());
    }

    #[test]
    fn missing_covariate_and_eta_dimension() {
        let spec = ModelSpec::from_toml_str(PK5).unwrap();
        let theta = spec.initial_theta();
        let none = Covariates::default();
        assert!(matches!(
            individual_parameters(&spec, &theta, &none, &[0.0; 4]),
            Err(ModelError::MissingCovariate { .. })
        ));
        assert!(matches!(
            individual_parameters(&spec, &theta, &covs(70.0), &[0.0; 3]),
            Err(ModelError::EtaDimension { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn named_theta_round_trip() {
        let spec = ModelSpec::from_toml_str(PK5).unwrap();
        let mut theta = spec.initial_theta();
        theta.pop[2] = 9.5;
        theta.correlations[0][0] = -0.4;
        let named = theta.to_named(&spec);
        assert_eq!(named["corr_V_Cl"], -0.4);
        assert_eq!(named["beta_Cl_LnWt70"], 0.75);
        assert_eq!(Theta::from_named(&spec, &named).unwrap(), theta);
    }

    #[test]
    fn pk_prediction_is_composition() {
        let spec = ModelSpec::from_toml_str(PK5).unwrap();
        let theta = spec.initial_theta();
        let obs = [0.5, 1.0, 2.0, 6.0, 24.0]
            .iter()
            .map(|&t| Observation {
                time: t,
                value: 1.0,
                channel: Channel::Y1Pk,
            })
            .collect();
        let s = Subject::new(
            "1",
            vec![DoseEvent {
                time: 0.0,
                amount: 100.0,
            }],
            obs,
            covs(70.0),
        );
        let psi = individual_parameters(&spec, &theta, &s.covariates, &[0.0; 4]).unwrap();
        let pred = predict_subject(&spec, &psi, &s, None).unwrap();
        let p = Pk1Params {
            ka: 1.0,
            v: 8.0,
            cl: 0.13,
            tlag: 0.8,
        };
        for (o, f) in s.observations.iter().zip(&pred) {
            assert_eq!(*f, pk_one_compartment(o.time, 100.0, &p));
        }
    }

    #[test]
    fn pd_prediction_needs_driver_and_holds_baseline() {
        let text = r#"
            label = "pd04"
            [structural]
            model = "irm"
            variant = "stimulate_output"
            [error]
            form = "combined1"
            [parameters]
            R0 = { pop = 100.0 }
            kout = { pop = 0.05 }
            Emax = { pop = 2.0 }
            EC50 = { pop = 1.0 }
        "#;
        let spec = ModelSpec::from_toml_str(text).unwrap();
        let obs = (0..6)
            .map(|i| Observation {
                time: i as f64 * 12.0,
                value: 100.0,
                channel: Channel::Y2Pd,
            })
            .collect();
        let s = Subject::new("1", vec![], obs, covs(70.0));
        let psi = individual_parameters(&spec, &spec.initial_theta(), &s.covariates, &[0.0; 4]).unwrap();
        assert!(matches!(
            predict_subject(&spec, &psi, &s, None),
            Err(ModelError::MissingDriver)
        ));
        let flat = PkCurve::new(
            PkModel::OneCompartment(Pk1Params {
                ka: 1.0,
                v: 8.0,
                cl: 0.13,
                tlag: 0.0,
            }),
            vec![],
        );
        let pred = predict_subject(&spec, &psi, &s, Some(&flat)).unwrap();
        assert!(pred.iter().all(|r| (r - 100.0).abs() < 1e-8));
    }

    proptest! {
        #[test]
        fn individual_parameters_positive(
            eta in prop::collection::vec(-30.0f64..30.0, 4),
            weight in 1.0f64..300.0,
            beta in -5.0f64..5.0,
        ) {
            let spec = ModelSpec::from_toml_str(PK5).unwrap();
            let mut theta = spec.initial_theta();
            theta.betas[2][0] = beta;
            let psi = individual_parameters(&spec, &theta, &covs(weight), &eta).unwrap();
            prop_assert!(psi.iter().all(|&v| v > 0.0));
        }
    }
}
