//! Indirect response (turnover) models driven by a plasma concentration.
//!
//! The response obeys `dR/dt = kin·(1 − I(C)) − kout·(1 + S(C))·R` with
//! `kin = R0·kout`, so `R0` is the drug-free steady state. `I` is a sigmoid
//! inhibition of the input rate and `S` a sigmoid stimulation of the output
//! rate; each variant switches one or both on.

use serde::{Deserialize, Serialize};

use super::ode::{integrate, OdeOptions};
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrmVariant {
    /// Inhibition of input (IRM-1).
    InhibitInput,
    /// Stimulation of output (IRM-4).
    StimulateOutput,
    /// Inhibition of input with `Imax` fixed at 1.
    InhibitInputFullImax,
    /// Inhibition of input and stimulation of output together.
    Combined,
}

impl IrmVariant {
    pub fn uses_inhibition(self) -> bool {
        !matches!(self, IrmVariant::StimulateOutput)
    }

    pub fn uses_stimulation(self) -> bool {
        matches!(self, IrmVariant::StimulateOutput | IrmVariant::Combined)
    }

    pub fn estimates_imax(self) -> bool {
        matches!(self, IrmVariant::InhibitInput | IrmVariant::Combined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrmParams {
    pub r0: f64,
    pub kout: f64,
    pub imax: Option<f64>,
    pub ic50: Option<f64>,
    pub emax: Option<f64>,
    pub ec50: Option<f64>,
    pub gamma_i: f64,
    pub gamma_e: f64,
}

impl IrmParams {
    pub fn kin(&self) -> f64 {
        self.r0 * self.kout
    }

    /// Check that every field the variant needs is present and in range.
    pub fn validate(&self, variant: IrmVariant) -> Result<(), ModelError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ModelError::InvalidParameter {
                    name: name.into(),
                    value: v,
                })
            }
        };
        let required = |name: &str, v: Option<f64>| v.ok_or_else(|| ModelError::MissingParameter(name.to_string()));
        positive("R0", self.r0)?;
        positive("kout", self.kout)?;
        if variant.uses_inhibition() {
            positive("IC50", required("IC50", self.ic50)?)?;
            positive("gamma_i", self.gamma_i)?;
        }
        if variant.estimates_imax() {
            positive("Imax", required("Imax", self.imax)?)?;
        }
        if variant.uses_stimulation() {
            let emax = required("Emax", self.emax)?;
            if !(emax >= 0.0 && emax.is_finite()) {
                return Err(ModelError::InvalidParameter {
                    name: "Emax".into(),
                    value: emax,
                });
            }
            positive("EC50", required("EC50", self.ec50)?)?;
            positive("gamma_e", self.gamma_e)?;
        }
        Ok(())
    }

    /// Fractional inhibition of the input rate, in `[0, 1]`.
    fn inhibition(&self, c: f64, variant: IrmVariant) -> f64 {
        if !variant.uses_inhibition() {
            return 0.0;
        }
        // Lognormal individual Imax can exceed 1; the fraction is capped there.
        let imax = match variant {
            IrmVariant::InhibitInputFullImax => 1.0,
            _ => self.imax.unwrap_or(0.0).min(1.0),
        };
        let ic50 = self.ic50.unwrap_or(f64::INFINITY);
        imax * hill(c, ic50, self.gamma_i)
    }

    fn stimulation(&self, c: f64, variant: IrmVariant) -> f64 {
        if !variant.uses_stimulation() {
            return 0.0;
        }
        let ec50 = self.ec50.unwrap_or(f64::INFINITY);
        self.emax.unwrap_or(0.0) * hill(c, ec50, self.gamma_e)
    }
}

/// `c^γ / (c50^γ + c^γ)`, evaluated as `1 / (1 + (c50/c)^γ)`.
fn hill(c: f64, c50: f64, gamma: f64) -> f64 {
    if c <= 0.0 {
        return 0.0;
    }
    if !c.is_finite() {
        return 1.0;
    }
    1.0 / (1.0 + (c50 / c).powf(gamma))
}

pub fn irm_derivative(r: f64, c: f64, p: &IrmParams, variant: IrmVariant) -> f64 {
    let input = p.kin() * (1.0 - p.inhibition(c, variant));
    let output = p.kout * (1.0 + p.stimulation(c, variant)) * r;
    input - output
}

/// Integrate the response from `R(0) = R0` and return it at each of `times`.
pub fn solve_irm<F>(
    conc: F,
    p: &IrmParams,
    variant: IrmVariant,
    times: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Vec<f64>, ModelError>
where
    F: Fn(f64) -> f64,
{
    p.validate(variant)?;
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(ModelError::UnsortedTimes);
    }
    let t0 = times.first().map_or(0.0, |&t| t.min(0.0));
    let opts = OdeOptions {
        rtol,
        atol,
        ..OdeOptions::default()
    };
    let states = integrate(
        |t, y, dy| dy[0] = irm_derivative(y[0], conc(t).max(0.0), p, variant),
        t0,
        &[p.r0],
        times,
        &opts,
    )?;
    Ok(states.into_iter().map(|s| s[0]).collect())
}
