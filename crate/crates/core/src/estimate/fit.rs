//! Outer optimization and fixed-parameter evaluation.

use std::collections::BTreeMap;

use super::inner::{laplace_objective, Conditional, Prior, WarmStarts};
use super::sampling::is_subject;
use super::{EstimateError, FitOptions, FitResult, LlMode, PopulationModel, Result, TestEvaluation};
use crate::dataset::Dataset;
use crate::optim::{nelder_mead, NelderMeadOptions};

const FIRST_STEP: f64 = 0.3;
const RESTART_STEP: f64 = 0.05;

/// Maximize the Laplace marginal likelihood from the model's default start.
pub fn fit_population<M: PopulationModel>(
    model: &M,
    dataset: &Dataset,
    options: &FitOptions,
) -> Result<FitResult<M::Theta>> {
    let start = model.initial_theta(dataset);
    fit_population_from(model, dataset, options, &start)
}

/// As [`fit_population`], starting from `start`.
pub fn fit_population_from<M: PopulationModel>(
    model: &M,
    dataset: &Dataset,
    options: &FitOptions,
    start: &M::Theta,
) -> Result<FitResult<M::Theta>> {
    options.validate()?;
    if dataset.is_empty() {
        return Err(EstimateError::EmptyDataset);
    }
    let inner = options.inner();
    let mut warm = WarmStarts::new();
    let mut objective = |x: &[f64]| laplace_objective(model, &model.unpack(x, start), dataset, &inner, &mut warm);

    let x0 = model.pack(start);
    let f0 = objective(&x0);
    if !f0.is_finite() {
        return Err(EstimateError::NonFiniteObjective(
            "objective at the starting point".into(),
        ));
    }

    let mut best_x = x0;
    let mut best_f = f0;
    let mut history = vec![f0];
    let mut iterations = 0;
    let mut evaluations = 1;
    let mut converged = false;
    let mut step = FIRST_STEP;
    for run in 0..=options.max_restarts {
        let budget = options.outer_max_iters.saturating_sub(iterations);
        if budget == 0 {
            break;
        }
        let nm = NelderMeadOptions {
            max_iters: budget,
            ftol: options.outer_tolerance,
            xtol: 1e-9,
        };
        let steps = vec![step; best_x.len()];
        let m = nelder_mead(&mut objective, &best_x, &steps, &nm);
        iterations += m.iterations;
        evaluations += m.evaluations;
        history.extend(m.history.iter().map(|&v| v.min(best_f)));
        let previous = best_f;
        if m.fx <= best_f {
            best_f = m.fx;
            best_x = m.x;
        }
        let rel_change = (previous - best_f) / previous.abs().max(1e-300);
        // A restart that finds nothing better confirms the first run.
        let settled = if run == 0 {
            options.max_restarts == 0
        } else {
            rel_change < options.outer_tolerance
        };
        if m.converged && settled {
            converged = true;
            break;
        }
        step = RESTART_STEP;
    }

    let theta_hat = model.unpack(&best_x, start);
    let eval = evaluate_fixed(model, &theta_hat, dataset, options)?;
    let n_obs = dataset.subjects().iter().map(|s| model.observations(s).len()).sum();
    Ok(FitResult {
        theta: model.named(&theta_hat),
        theta_hat,
        minus2ll: eval.minus2ll,
        minus2ll_se: eval.minus2ll_se,
        ll_mode: options.ll_mode,
        seed: options.seed,
        ebes: eval.ebes,
        converged: converged && eval.failed_subjects.is_empty(),
        n_obs,
        p_count: model.p_count(),
        iterations,
        evaluations,
        failed_subjects: eval.failed_subjects,
        history,
    })
}

/// Evaluate `dataset` with population parameters held at `theta`: fresh EBEs
/// per subject, individual predictions, and −2LL in `options.ll_mode`.
/// Subjects whose inner problem fails are excluded and listed.
pub fn evaluate_fixed<M: PopulationModel>(
    model: &M,
    theta: &M::Theta,
    dataset: &Dataset,
    options: &FitOptions,
) -> Result<TestEvaluation> {
    options.validate()?;
    let inner = options.inner();
    let prior = Prior::new(model.omega(theta))?;
    let mut out = TestEvaluation {
        minus2ll: 0.0,
        minus2ll_se: 0.0,
        ll_mode: options.ll_mode,
        seed: options.seed,
        ebes: BTreeMap::new(),
        subject_ids: Vec::new(),
        obs: Vec::new(),
        ipred: Vec::new(),
        gpred: Vec::new(),
        n_obs: 0,
        failed_subjects: Vec::new(),
    };
    let mut var = 0.0;
    for subject in dataset.subjects() {
        let cond = Conditional::new(model, theta, subject, &prior);
        let attempt = (|| -> Result<_> {
            let mode = cond.find_mode(&inner)?;
            if !mode.converged {
                return Err(EstimateError::InnerNonConvergence {
                    subject: subject.id.clone(),
                    grad_norm: mode.grad_norm,
                });
            }
            let ipred = cond.predict(&mode.eta)?;
            let gpred = ipred
                .iter()
                .map(|&f| model.error_sd(theta, f))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let (m2ll, v) = match options.ll_mode {
                LlMode::Laplace => (mode.laplace(), 0.0),
                LlMode::ImportanceSampling => is_subject(&cond, &mode, options.is_samples, options.seed)?,
            };
            if !m2ll.is_finite() {
                return Err(EstimateError::NonFiniteObjective(format!("subject `{}`", subject.id)));
            }
            Ok((mode.eta, ipred, gpred, m2ll, v))
        })();
        match attempt {
            Ok((eta, ipred, gpred, m2ll, v)) => {
                out.minus2ll += m2ll;
                var += v;
                out.ebes.insert(subject.id.clone(), eta);
                out.subject_ids
                    .extend(std::iter::repeat_n(subject.id.clone(), ipred.len()));
                out.obs.extend(cond.y.iter().copied());
                out.ipred.extend(ipred);
                out.gpred.extend(gpred);
            }
            Err(e) => out.failed_subjects.push((subject.id.clone(), e.to_string())),
        }
    }
    if out.ebes.is_empty() && !dataset.is_empty() {
        let reasons: Vec<String> = out.failed_subjects.iter().map(|(id, r)| format!("{id}: {r}")).collect();
        return Err(EstimateError::AllSubjectsFailed(reasons.join("; ")));
    }
    out.n_obs = out.obs.len();
    out.minus2ll_se = 2.0 * var.sqrt();
    Ok(out)
}
