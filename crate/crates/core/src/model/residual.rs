//! Residual error models.
//!
//! `y = f + g(f)·e` with `e ~ N(0, 1)` and
//! - combined1: `g = a + b·f^c`
//! - combined2: `g = sqrt(a² + (b·f^c)²)`

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorForm {
    Combined1,
    Combined2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSpec {
    pub form: ErrorForm,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub estimate_a: bool,
    pub estimate_b: bool,
    pub estimate_c: bool,
}

impl ErrorSpec {
    pub fn combined1(a: f64, b: f64) -> Self {
        ErrorSpec {
            form: ErrorForm::Combined1,
            a,
            b,
            c: 1.0,
            estimate_a: true,
            estimate_b: true,
            estimate_c: false,
        }
    }

    pub fn combined2(a: f64, b: f64) -> Self {
        ErrorSpec {
            form: ErrorForm::Combined2,
            ..ErrorSpec::combined1(a, b)
        }
    }

    pub fn with_exponent(mut self, c: f64) -> Self {
        self.c = c;
        self.estimate_c = true;
        self
    }

    pub fn n_estimated(&self) -> usize {
        [self.estimate_a, self.estimate_b, self.estimate_c]
            .iter()
            .filter(|&&e| e)
            .count()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.a >= 0.0 && self.b >= 0.0 && self.a + self.b > 0.0 && self.c > 0.0;
        if ok && self.a.is_finite() && self.b.is_finite() && self.c.is_finite() {
            Ok(())
        } else {
            Err(ModelError::InvalidErrorModel(format!(
                "a={}, b={}, c={} (need a, b >= 0, a + b > 0, c > 0)",
                self.a, self.b, self.c
            )))
        }
    }
}

/// Residual standard deviation at prediction `f` (clamped at 0 from below).
pub fn error_sd(f: f64, spec: &ErrorSpec) -> Result<f64, ModelError> {
    let f = f.max(0.0);
    let prop = if spec.b == 0.0 { 0.0 } else { spec.b * f.powf(spec.c) };
    let sd = match spec.form {
        ErrorForm::Combined1 => spec.a + prop,
        ErrorForm::Combined2 => spec.a.hypot(prop),
    };
    if sd > 0.0 && sd.is_finite() {
        Ok(sd)
    } else {
        Err(ModelError::NonPositiveSd { f, sd })
    }
}

/// `d g / d f`, used by the Gauss–Newton inner step.
pub fn error_sd_slope(f: f64, spec: &ErrorSpec) -> f64 {
    let f = f.max(0.0);
    if spec.b == 0.0 || f == 0.0 {
        return 0.0;
    }
    let fc = f.powf(spec.c);
    let dprop = spec.b * spec.c * fc / f;
    match spec.form {
        ErrorForm::Combined1 => dprop,
        ErrorForm::Combined2 => {
            let prop = spec.b * fc;
            let g = spec.a.hypot(prop);
            prop * dprop / g
        }
    }
}
