//! Summary statistics of a fitted or evaluated dataset.
//!
//! All residuals use individual predictions. `mad` is the median of the
//! absolute residuals, and the zero-intercept r² is the uncentered
//! `(Σ y·ŷ)² / (Σ y² · Σ ŷ²)`, clamped below 1 so SMPQ stays finite.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::estimate::{sample_conditional, EstimateError, InnerOptions, PopulationModel, TestEvaluation};

pub const R2_CLAMP: f64 = 1.0 - 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no residuals to summarize")]
    EmptyVectors,
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("a vector is identically zero")]
    DegenerateVectors,
    #[error("residual SD {value} at position {index} is not positive")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error("need at least 2 residuals, got {0}")]
    TooFewResiduals(usize),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        Err(MetricsError::LengthMismatch(a.len(), b.len()))
    } else {
        Ok(())
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualMetrics {
    pub rss: f64,
    pub rmse: f64,
    pub sad: f64,
    pub mad: f64,
}

pub fn residual_metrics(obs: &[f64], ipred: &[f64]) -> Result<ResidualMetrics> {
    same_len(obs, ipred)?;
    if obs.is_empty() {
        return Err(MetricsError::EmptyVectors);
    }
    let abs: Vec<f64> = obs.iter().zip(ipred).map(|(y, f)| (y - f).abs()).collect();
    let rss: f64 = abs.iter().map(|r| r * r).sum();
    Ok(ResidualMetrics {
        rss,
        rmse: (rss / obs.len() as f64).sqrt(),
        sad: abs.iter().sum(),
        mad: median(&abs).expect("non-empty"),
    })
}

/// Uncentered r² of the through-origin line, clamped to `[0, R2_CLAMP]`.
pub fn zero_intercept_r2(obs: &[f64], ipred: &[f64]) -> Result<f64> {
    same_len(obs, ipred)?;
    if obs.len() < 2 {
        return Err(MetricsError::TooFewResiduals(obs.len()));
    }
    let syy: f64 = obs.iter().map(|y| y * y).sum();
    let sff: f64 = ipred.iter().map(|f| f * f).sum();
    if syy == 0.0 || sff == 0.0 {
        return Err(MetricsError::DegenerateVectors);
    }
    let syf: f64 = obs.iter().zip(ipred).map(|(y, f)| y * f).sum();
    Ok((syf * syf / (syy * sff)).clamp(0.0, R2_CLAMP))
}

/// `−ln(1 − r²)`.
pub fn smpq(r2: f64) -> f64 {
    -(1.0 - r2.clamp(0.0, R2_CLAMP)).ln()
}

pub fn iwres(obs: &[f64], ipred: &[f64], gpred: &[f64]) -> Result<Vec<f64>> {
    same_len(obs, ipred)?;
    same_len(obs, gpred)?;
    obs.iter()
        .zip(ipred)
        .zip(gpred)
        .enumerate()
        .map(|(index, ((y, f), &g))| {
            if g > 0.0 && g.is_finite() {
                Ok((y - f) / g)
            } else {
                Err(MetricsError::NonPositiveWeight { index, value: g })
            }
        })
        .collect()
}

/// Sample SD with the `n − 1` denominator.
pub fn sample_sd(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(MetricsError::TooFewResiduals(x.len()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    Ok((x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// `1 − SD(IWRES)`; negative when residuals are over-dispersed.
pub fn eps_shrinkage(iwres: &[f64]) -> Result<f64> {
    Ok(1.0 - sample_sd(iwres)?)
}

/// ε-shrinkage with IWRES evaluated at draws from each subject's
/// conditional distribution of η, pooled over draws and subjects.
pub fn eps_shrinkage_sim<M: PopulationModel>(
    model: &M,
    theta: &M::Theta,
    dataset: &Dataset,
    ndraws: usize,
    seed: u64,
    inner: &InnerOptions,
) -> Result<f64> {
    let mut pooled = Vec::new();
    let push = |subject, eta: &[f64], pooled: &mut Vec<f64>| -> Result<()> {
        let y = model.observations(subject);
        if y.is_empty() {
            return Ok(());
        }
        let f = model
            .predict(theta, subject, eta)
            .map_err(|e| MetricsError::Estimate(e.into()))?;
        let g = f
            .iter()
            .map(|&fj| model.error_sd(theta, fj))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| MetricsError::Estimate(e.into()))?;
        pooled.extend(iwres(&y, &f, &g)?);
        Ok(())
    };
    for subject in dataset.subjects() {
        if model.n_eta() == 0 {
            push(subject, &[], &mut pooled)?;
            continue;
        }
        if model.observations(subject).is_empty() {
            continue;
        }
        for eta in sample_conditional(model, theta, subject, ndraws, seed, inner)? {
            push(subject, &eta, &mut pooled)?;
        }
    }
    eps_shrinkage(&pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Minus2ll,
    Aic,
    Bic,
    Rss,
    Rmse,
    Sad,
    Mad,
    Smpq,
    EpsShrinkEbe,
    EpsShrinkSim,
}

impl Statistic {
    pub const ALL: [Statistic; 10] = [
        Statistic::Minus2ll,
        Statistic::Aic,
        Statistic::Bic,
        Statistic::Rss,
        Statistic::Rmse,
        Statistic::Sad,
        Statistic::Mad,
        Statistic::Smpq,
        Statistic::EpsShrinkEbe,
        Statistic::EpsShrinkSim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Minus2ll => "minus2ll",
            Statistic::Aic => "aic",
            Statistic::Bic => "bic",
            Statistic::Rss => "rss",
            Statistic::Rmse => "rmse",
            Statistic::Sad => "sad",
            Statistic::Mad => "mad",
            Statistic::Smpq => "smpq",
            Statistic::EpsShrinkEbe => "eps_shrink_ebe",
            Statistic::EpsShrinkSim => "eps_shrink_sim",
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Statistic {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Statistic::ALL
            .into_iter()
            .find(|st| st.name() == key || (key == "-2ll" && *st == Statistic::Minus2ll))
            .ok_or_else(|| format!("unknown statistic `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub minus2ll: f64,
    pub aic: f64,
    pub bic: f64,
    pub rss: f64,
    pub rmse: f64,
    pub sad: f64,
    pub mad: f64,
    pub smpq: f64,
    pub eps_shrink_ebe: f64,
    /// Absent when conditional sampling was skipped or failed.
    pub eps_shrink_sim: Option<f64>,
    pub n_obs: usize,
    pub p_count: usize,
}

impl MetricSet {
    /// Value of `stat`, `None` when missing or not finite.
    pub fn get(&self, stat: Statistic) -> Option<f64> {
        let v = match stat {
            Statistic::Minus2ll => self.minus2ll,
            Statistic::Aic => self.aic,
            Statistic::Bic => self.bic,
            Statistic::Rss => self.rss,
            Statistic::Rmse => self.rmse,
            Statistic::Sad => self.sad,
            Statistic::Mad => self.mad,
            Statistic::Smpq => self.smpq,
            Statistic::EpsShrinkEbe => self.eps_shrink_ebe,
            Statistic::EpsShrinkSim => self.eps_shrink_sim?,
        };
        v.is_finite().then_some(v)
    }
}

/// Every statistic of one evaluated dataset.
pub fn assemble_metric_set(eval: &TestEvaluation, p_count: usize, eps_shrink_sim: Option<f64>) -> Result<MetricSet> {
    let res = residual_metrics(&eval.obs, &eval.ipred)?;
    let r2 = zero_intercept_r2(&eval.obs, &eval.ipred)?;
    let w = iwres(&eval.obs, &eval.ipred, &eval.gpred)?;
    let n = eval.obs.len();
    let p = p_count as f64;
    Ok(MetricSet {
        minus2ll: eval.minus2ll,
        aic: eval.minus2ll + 2.0 * p,
        bic: eval.minus2ll + (n as f64).ln() * p,
        rss: res.rss,
        rmse: res.rmse,
        sad: res.sad,
        mad: res.mad,
        smpq: smpq(r2),
        eps_shrink_ebe: eps_shrinkage(&w)?,
        eps_shrink_sim,
        n_obs: n,
        p_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::testing::{toy_posterior, toy_subject, LinearToy, ToyTheta};
    use crate::estimate::LlMode;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn residual_reference_values() {
        let m = residual_metrics(&[1.0, -2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.rss, 14.0);
        assert!((m.rmse - 2.1602).abs() < 1e-4);
        assert_eq!(m.sad, 6.0);
        assert_eq!(m.mad, 2.0);
        let z = residual_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((z.rss, z.rmse, z.sad, z.mad), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(residual_metrics(&[], &[]), Err(MetricsError::EmptyVectors));
    }

    #[test]
    fn r2_reference_values() {
        assert_eq!(zero_intercept_r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), R2_CLAMP);
        assert_eq!(zero_intercept_r2(&[1.0, -1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(zero_intercept_r2(&[1.0, 2.0], &[3.0, 6.0]).unwrap(), R2_CLAMP);
        assert_eq!(
            zero_intercept_r2(&[0.0, 0.0], &[1.0, 2.0]),
            Err(MetricsError::DegenerateVectors)
        );
    }

    #[test]
    fn smpq_reference_values() {
        assert_eq!(smpq(0.0), 0.0);
        assert!((smpq(1.0 - (-1.0f64).exp()) - 1.0).abs() < 1e-14);
        assert!((smpq(1.0) - 27.631).abs() < 1e-2);
        // Inverting a reported SMPQ of 4.959724 gives r² = 0.992985 (quoted as ≈ 0.99301).
        let r2 = 1.0 - (-4.959724f64).exp();
        assert!((r2 - 0.992985).abs() < 1e-6);
        assert!((r2 - 0.99301).abs() < 5e-5);
        assert!((smpq(r2) - 4.959724).abs() < 1e-9);
    }

    #[test]
    fn iwres_and_shrinkage() {
        assert_eq!(iwres(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(iwres(&[3.0], &[1.0], &[2.0]).unwrap(), vec![1.0]);
        assert!(matches!(
            iwres(&[1.0], &[1.0], &[0.0]),
            Err(MetricsError::NonPositiveWeight { index: 0, .. })
        ));
        assert_eq!(eps_shrinkage(&[0.0; 5]).unwrap(), 1.0);
        assert_eq!(eps_shrinkage(&[1.0]), Err(MetricsError::TooFewResiduals(1)));

        let x = [1.0, -1.0, 2.0, -2.0];
        let sd = sample_sd(&x).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| v * 1.3 / sd).collect();
        assert!((eps_shrinkage(&scaled).unwrap() + 0.3).abs() < 1e-12);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let normal: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(eps_shrinkage(&normal).unwrap().abs() < 0.02);
    }

    #[test]
    fn information_criteria() {
        let eval = TestEvaluation {
            minus2ll: 100.0,
            minus2ll_se: 0.0,
            ll_mode: LlMode::Laplace,
            seed: 0,
            ebes: Default::default(),
            subject_ids: vec!["1".into(); 100],
            obs: (0..100).map(|i| 1.0 + i as f64).collect(),
            ipred: (0..100).map(|i| 1.2 + i as f64).collect(),
            gpred: vec![1.0; 100],
            n_obs: 100,
            failed_subjects: vec![],
        };
        let m = assemble_metric_set(&eval, 3, None).unwrap();
        assert_eq!(m.aic, 106.0);
        let m = assemble_metric_set(&eval, 2, None).unwrap();
        assert!((m.bic - 109.2103).abs() < 1e-4);
        assert_eq!(m.get(Statistic::EpsShrinkSim), None);
        assert!(m.bic >= m.aic);
    }

    #[test]
    fn statistic_names_round_trip() {
        for s in Statistic::ALL {
            assert_eq!(s.name().parse::<Statistic>().unwrap(), s);
        }
        assert!("nope".parse::<Statistic>().is_err());
    }

    #[test]
    fn simulated_shrinkage_matches_gaussian_algebra() {
        let t = ToyTheta {
            mu: 0.0,
            omega: 1.0,
            sigma: 0.5,
        };
        let y = [0.9, 1.6, 0.4, 1.2];
        let d = Dataset::new(vec![toy_subject("1", &y)], "test").unwrap();
        let value = eps_shrinkage_sim(&LinearToy, &t, &d, 10_000, 4, &InnerOptions::default()).unwrap();
        // IWRES_j = (y_j − η)/σ with η ~ N(m, v): pooled second moment minus squared mean.
        let (m, v) = toy_posterior(&t, &y);
        let n = y.len() as f64;
        let mean = y.iter().map(|yj| (yj - m) / t.sigma).sum::<f64>() / n;
        let second = y
            .iter()
            .map(|yj| ((yj - m).powi(2) + v) / (t.sigma * t.sigma))
            .sum::<f64>()
            / n;
        let sd = (second - mean * mean).sqrt();
        assert!(((1.0 - value) - sd).abs() / sd < 0.02, "sim sd {} vs {sd}", 1.0 - value);
        let again = eps_shrinkage_sim(&LinearToy, &t, &d, 10_000, 4, &InnerOptions::default()).unwrap();
        assert_eq!(value, again);
    }

    proptest! {
        #[test]
        fn smpq_increasing(a in 0.0f64..0.999, b in 0.0f64..0.999) {
            prop_assume!(a < b);
            prop_assert!(smpq(a) < smpq(b));
        }

        #[test]
        fn shrinking_residuals_never_lowers_r2(
            pairs in prop::collection::vec((0.1f64..100.0, -5.0f64..5.0), 2..30),
            t in 0.0f64..1.0,
        ) {
            let ipred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let obs: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
            let shrunk: Vec<f64> = pairs.iter().map(|p| p.0 + t * p.1).collect();
            prop_assume!(obs.iter().any(|&v| v != 0.0));
            let r_full = zero_intercept_r2(&obs, &ipred).unwrap();
            let r_shrunk = zero_intercept_r2(&shrunk, &ipred).unwrap();
            prop_assert!(r_shrunk >= r_full - 1e-12);
            prop_assert!(smpq(r_shrunk) >= smpq(r_full) - 1e-9);
        }

        #[test]
        fn permutation_invariance(
            pairs in prop::collection::vec((0.1f64..50.0, 0.1f64..50.0), 2..20),
            rot in 0usize..20,
        ) {
            let obs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let ipred: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let k = rot % obs.len();
            let mut o2 = obs.clone();
            let mut i2 = ipred.clone();
            o2.rotate_left(k);
            i2.rotate_left(k);
            o2.reverse();
            i2.reverse();
            let a = residual_metrics(&obs, &ipred).unwrap();
            let b = residual_metrics(&o2, &i2).unwrap();
            prop_assert!((a.rss - b.rss).abs() <= 1e-9 * a.rss.max(1.0));
            prop_assert!((a.sad - b.sad).abs() <= 1e-9 * a.sad.max(1.0));
            prop_assert_eq!(a.mad, b.mad);
            let ra = zero_intercept_r2(&obs, &ipred).unwrap();
            let rb = zero_intercept_r2(&o2, &i2).unwrap();
            prop_assert!((ra - rb).abs() < 1e-12);
        }

        #[test]
        fn homogeneity(res in prop::collection::vec(-10.0f64..10.0, 1..20), k in 0.1f64..10.0) {
            let zero = vec![0.0; res.len()];
            let scaled: Vec<f64> = res.iter().map(|r| r * k).collect();
            let a = residual_metrics(&res, &zero).unwrap();
            let b = residual_metrics(&scaled, &zero).unwrap();
            prop_assert!((b.rss - k * k * a.rss).abs() <= 1e-9 * b.rss.max(1.0));
            prop_assert!((b.rmse - k * a.rmse).abs() <= 1e-9 * b.rmse.max(1.0));
            prop_assert!((b.mad - k * a.mad).abs() <= 1e-9 * b.mad.max(1.0));
        }

        #[test]
        fn shrinkage_sign_flip_on_symmetric_vectors(
            half in prop::collection::vec(-5.0f64..5.0, 1..15),
            flips in prop::collection::vec(any::<bool>(), 15),
        ) {
            // Symmetric vector (x, −x) has mean zero; flipping both members of a pair keeps it so.
            let mut v: Vec<f64> = half.iter().flat_map(|&x| [x, -x]).collect();
            let base = eps_shrinkage(&v).unwrap();
            for (i, flip) in flips.iter().take(half.len()).enumerate() {
                if *flip {
                    v[2 * i] = -v[2 * i];
                    v[2 * i + 1] = -v[2 * i + 1];
                }
            }
            prop_assert!((eps_shrinkage(&v).unwrap() - base).abs() < 1e-12);
        }
    }
}
