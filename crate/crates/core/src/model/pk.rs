//! Closed-form oral-absorption compartmental models.
//!
//! One compartment with first-order absorption and elimination:
//!
//! ```text
//! C(t) = D·ka / (V·(ka − ke)) · (exp(−ke·τ) − exp(−ka·τ)),   τ = t − tlag,  ke = Cl/V
//! ```
//!
//! Two compartments, written with macro constants α ≥ β:
//!
//! ```text
//! C(t) = D · (A·exp(−α·τ) + B·exp(−β·τ) − (A + B)·exp(−ka·τ))
//! ```
//!
//! Both curves are zero for `t ≤ tlag` and bioavailability is 1.

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Relative gap below which `ka` and `ke` are treated as equal.
const KA_KE_LIMIT: f64 = 1e-8;
/// Relative gap below which `ka` collides with a disposition rate.
const KA_MACRO_COLLISION: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pk1Params {
    pub ka: f64,
    pub v: f64,
    pub cl: f64,
    pub tlag: f64,
}

impl Pk1Params {
    pub fn ke(&self) -> f64 {
        self.cl / self.v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pk2Params {
    pub ka: f64,
    pub cl: f64,
    pub v1: f64,
    pub q: f64,
    pub v2: f64,
    pub tlag: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroConstants {
    pub alpha: f64,
    pub beta: f64,
    /// Coefficient of `exp(−α·τ)`, per litre.
    pub a: f64,
    /// Coefficient of `exp(−β·τ)`, per litre.
    pub b: f64,
}

/// Concentration after a single dose of `dose` given at time zero.
pub fn pk_one_compartment(t: f64, dose: f64, p: &Pk1Params) -> f64 {
    let tau = t - p.tlag;
    if tau <= 0.0 {
        return 0.0;
    }
    let ke = p.ke();
    let d = p.ka - ke;
    let eke = (-ke * tau).exp();
    // (exp(−ke τ) − exp(−ka τ)) / (ka − ke) without cancellation.
    let s = if (d / ke).abs() < KA_KE_LIMIT {
        tau
    } else {
        -(-d * tau).exp_m1() / d
    };
    (dose * p.ka / p.v * eke * s).max(0.0)
}

pub fn pk_two_compartment_macro(p: &Pk2Params) -> Result<MacroConstants, ModelError> {
    for (name, v) in [("ka", p.ka), ("Cl", p.cl), ("V1", p.v1), ("Q", p.q), ("V2", p.v2)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ModelError::InvalidParameter {
                name: name.into(),
                value: v,
            });
        }
    }
    let k21 = p.q / p.v2;
    let k10 = p.cl / p.v1;
    let sum = p.q / p.v1 + k21 + k10;
    let prod = k21 * k10;
    let beta = 0.5 * (sum - (sum * sum - 4.0 * prod).sqrt());
    let alpha = prod / beta;
    for rate in [alpha, beta] {
        if ((p.ka - rate) / rate).abs() < KA_MACRO_COLLISION {
            return Err(ModelError::DegenerateRates { ka: p.ka, rate });
        }
    }
    let scale = p.ka / p.v1;
    let a = scale * (k21 - alpha) / ((p.ka - alpha) * (beta - alpha));
    let b = scale * (k21 - beta) / ((p.ka - beta) * (alpha - beta));
    Ok(MacroConstants { alpha, beta, a, b })
}

pub fn pk_two_compartment_conc(t: f64, dose: f64, m: &MacroConstants, ka: f64, tlag: f64) -> f64 {
    let tau = t - tlag;
    if tau <= 0.0 {
        return 0.0;
    }
    let c = m.a * (-m.alpha * tau).exp() + m.b * (-m.beta * tau).exp() - (m.a + m.b) * (-ka * tau).exp();
    (dose * c).max(0.0)
}

/// A frozen structural PK model that can be evaluated at any time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PkModel {
    OneCompartment(Pk1Params),
    TwoCompartment { params: Pk2Params, macros: MacroConstants },
}

impl PkModel {
    pub fn two_compartment(params: Pk2Params) -> Result<Self, ModelError> {
        Ok(PkModel::TwoCompartment {
            macros: pk_two_compartment_macro(&params)?,
            params,
        })
    }

    /// Concentration from a single unit-time-zero dose.
    pub fn single_dose(&self, t: f64, dose: f64) -> f64 {
        match self {
            PkModel::OneCompartment(p) => pk_one_compartment(t, dose, p),
            PkModel::TwoCompartment { params, macros } => {
                pk_two_compartment_conc(t, dose, macros, params.ka, params.tlag)
            }
        }
    }
}
