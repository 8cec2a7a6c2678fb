//! Monte Carlo diagnosability estimation.
//!
//! The diagnosability of a hypothesis set under a control source is the
//! worst-case expected separation between the true hypothesis's predicted
//! measurements and every other hypothesis's, normalized by the latter's
//! innovation covariance:
//!
//! ```text
//! lambda_k = min_{m != h*} E[ (1/N) sum_{i=k-N+1..k} g_i' S_{m,i}^-1 g_i ],
//! g_i = y_pred(h*, i) - y_pred(m, i)
//! ```
//!
//! minimized over all decision-eligible steps `k >= N - 1`. A value of zero
//! means some false hypothesis predicts the same measurements as the truth,
//! so no amount of data from these controls can separate them. The companion
//! statistic for unmodeled faults replaces the truth's prediction with the
//! actual measurement `y_i` and minimizes over every hypothesis; it should
//! grow with `N` for faults that identification is supposed to flag as null.
//!
//! Expectations are over the initial-state prior and both noise sources,
//! estimated from `T` independent rollouts. The minimum over a finite step
//! range upper-bounds the infinite-horizon definition. Steps whose filters
//! diverged are excluded from the estimate and counted separately.

use rand::Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{FidError, Result};
use crate::filter::{innovation_stat, FilterBank, FilterConfig};
use crate::models::{ControlPolicy, Scenario, SystemModel};
use crate::FidRng;

#[derive(Clone, Debug)]
pub struct DiagnosabilityConfig {
    /// Window length `N`.
    pub window: usize,
    /// Last step index; `None` takes the scenario horizon.
    pub horizon: Option<usize>,
    /// Monte Carlo rollouts.
    pub trials: usize,
    pub filter: FilterConfig,
    /// Control source override; `None` uses the scenario policy. Passing an
    /// open-loop sequence replays recorded (e.g. actively selected) inputs.
    pub policy: Option<ControlPolicy>,
}

impl Default for DiagnosabilityConfig {
    fn default() -> Self {
        Self {
            window: 10,
            horizon: None,
            trials: 200,
            filter: FilterConfig::default(),
            policy: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosabilityReport {
    pub window: usize,
    pub trials: usize,
    /// `(k, lambda_k)` for every decision-eligible step.
    pub lambda_per_k: Vec<(usize, f64)>,
    /// Minimum over the step range; the diagnosability estimate.
    pub lambda_min: f64,
    /// Step attaining the minimum.
    pub bottleneck_k: usize,
    /// `(reference, m)`: the pair of hypotheses realizing the minimum. The
    /// reference is the true hypothesis index, or `None` when the reference
    /// was the raw measurement of an unmodeled truth.
    pub bottleneck_pair: (Option<usize>, usize),
    /// Standard error of the window-mean estimate at the bottleneck.
    pub stderr: f64,
    /// `(k, m, trial)` contributions dropped because a filter diverged.
    pub diverged_steps: usize,
    /// Contributions attempted in total.
    pub total_steps: usize,
}

impl DiagnosabilityReport {
    /// True when the estimate cannot be distinguished from zero: the control
    /// source leaves some false hypothesis unseparated from the truth.
    pub fn is_fundamentally_limited(&self, tol: Option<f64>) -> bool {
        is_fundamentally_limited(self, tol)
    }
}

/// Default tolerance is three standard errors of the bottleneck estimate.
pub fn is_fundamentally_limited(report: &DiagnosabilityReport, tol: Option<f64>) -> bool {
    report.lambda_min <= tol.unwrap_or(3.0 * report.stderr)
}

/// What the per-hypothesis gap is measured against.
#[derive(Clone, Copy)]
enum GapReference {
    /// Predicted measurement of the true hypothesis (diagnosability).
    PredictedOf(usize),
    /// The actual measurement (unmodeled-fault separation).
    Measurement,
}

/// Diagnosability of the scenario's hypothesis set with `h_star` (an index
/// into the set) as the truth.
pub fn estimate_lambda(
    scenario: &Scenario,
    h_star: usize,
    config: &DiagnosabilityConfig,
    rng: &mut FidRng,
) -> Result<DiagnosabilityReport> {
    let n_m = scenario.hypotheses().len();
    if h_star >= n_m {
        return Err(FidError::OutOfRange {
            context: "estimate_lambda",
            name: "h_star",
            value: h_star as f64,
            bounds: "[0, |M|)",
        });
    }
    if n_m < 2 {
        return Err(FidError::Config(
            "diagnosability needs at least two hypotheses".into(),
        ));
    }
    let truth = scenario.hypotheses()[h_star].clone();
    estimate(
        scenario,
        &truth,
        GapReference::PredictedOf(h_star),
        Some(h_star),
        config,
        rng,
    )
}

/// Separation statistic for a truth outside the hypothesis set: the gap of
/// each hypothesis's predicted measurement from the realized measurement,
/// minimized over all hypotheses. (Callers are trusted on the exclusion;
/// passing a modeled truth is a legitimate way to observe the whitened
/// baseline of roughly `n_y` that does not grow with `N`.)
pub fn estimate_lambda_bar(
    scenario: &Scenario,
    truth: &SystemModel,
    config: &DiagnosabilityConfig,
    rng: &mut FidRng,
) -> Result<DiagnosabilityReport> {
    estimate(scenario, truth, GapReference::Measurement, None, config, rng)
}

fn estimate(
    scenario: &Scenario,
    truth: &SystemModel,
    reference: GapReference,
    skip: Option<usize>,
    config: &DiagnosabilityConfig,
    rng: &mut FidRng,
) -> Result<DiagnosabilityReport> {
    if config.trials == 0 {
        return Err(FidError::Config("diagnosability needs trials >= 1".into()));
    }
    if config.window == 0 {
        return Err(FidError::Config("window length must be at least 1".into()));
    }
    let k_last = config.horizon.unwrap_or(scenario.horizon());
    if k_last + 1 < config.window {
        return Err(FidError::Config(format!(
            "horizon {} cannot fill a window of {}",
            k_last, config.window
        )));
    }
    let policy = config
        .policy
        .clone()
        .unwrap_or_else(|| scenario.policy().clone());

    // Derive one seed per rollout up front so parallel scheduling cannot
    // perturb the stream assignment.
    let seeds: Vec<u64> = (0..config.trials).map(|_| rng.random()).collect();
    let per_trial: Vec<(Vec<Vec<f64>>, usize)> = seeds
        .par_iter()
        .map(|seed| {
            let mut trial_rng = FidRng::seed_from_u64(*seed);
            rollout(
                scenario,
                truth,
                &policy,
                reference,
                k_last,
                &config.filter,
                &mut trial_rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    aggregate(&per_trial, scenario, reference, skip, config, k_last)
}

/// One rollout: simulate the truth, run the filter bank, and record the
/// normalized gap of every hypothesis at every step (`NaN` where a filter
/// diverged). Returns the `terms[k][m]` table and the diverged-step count.
fn rollout(
    scenario: &Scenario,
    truth: &SystemModel,
    policy: &ControlPolicy,
    reference: GapReference,
    k_last: usize,
    filter_config: &FilterConfig,
    rng: &mut FidRng,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let hyp = scenario.hypotheses();
    let n_m = hyp.len();
    let mut bank = FilterBank::new(hyp, scenario.x0_mean(), scenario.x0_cov(), *filter_config)?;
    let mut x = scenario.draw_x0(rng);
    // Feedback policies act on an estimate; use the reference hypothesis's
    // filter (the nominal one when the truth is unmodeled).
    let ref_idx = match reference {
        GapReference::PredictedOf(i) => i,
        GapReference::Measurement => 0,
    };

    let mut terms = Vec::with_capacity(k_last + 1);
    let mut diverged = 0usize;
    let mut u_prev: Option<nalgebra::DVector<f64>> = None;
    for k in 0..=k_last {
        if let Some(u) = &u_prev {
            x = truth.step_dynamics(&x, u, rng)?;
        }
        let y = truth.measure(&x, rng)?;
        let records = bank.step(hyp, u_prev.as_ref(), &y);

        let ref_y = match reference {
            GapReference::PredictedOf(i) => records[i].as_ref().map(|r| r.y_pred.clone()),
            GapReference::Measurement => Some(y.clone()),
        };
        let mut row = vec![f64::NAN; n_m];
        for (m, record) in records.iter().enumerate() {
            if matches!(reference, GapReference::PredictedOf(i) if i == m) {
                continue;
            }
            match (&ref_y, record) {
                (Some(ref_y), Some(rec)) => {
                    let gap = ref_y - &rec.y_pred;
                    match innovation_stat(&gap, &rec.s) {
                        Ok(term) => row[m] = term,
                        Err(_) => diverged += 1,
                    }
                }
                _ => diverged += 1,
            }
        }
        terms.push(row);

        if k < k_last {
            let x_ref = bank.filter(ref_idx).mean().clone();
            let mut u = policy.control(&x_ref, k);
            scenario.admissible().clamp(&mut u);
            u_prev = Some(u);
        }
    }
    Ok((terms, diverged))
}

fn aggregate(
    per_trial: &[(Vec<Vec<f64>>, usize)],
    scenario: &Scenario,
    reference: GapReference,
    skip: Option<usize>,
    config: &DiagnosabilityConfig,
    k_last: usize,
) -> Result<DiagnosabilityReport> {
    let n_m = scenario.hypotheses().len();
    let n = config.window;
    let diverged_steps: usize = per_trial.iter().map(|(_, d)| d).sum();
    let hyp_per_step = n_m - usize::from(skip.is_some());
    let total_steps = per_trial.len() * (k_last + 1) * hyp_per_step;

    let mut lambda_per_k = Vec::new();
    let mut best: Option<(f64, usize, usize, f64)> = None; // (lambda, k, m, se)
    for k in (n - 1)..=k_last {
        // For each hypothesis, the per-trial window means that contain no
        // diverged step.
        let mut min_m: Option<(f64, usize, f64)> = None;
        for m in 0..n_m {
            if skip == Some(m) {
                continue;
            }
            let mut window_means = Vec::with_capacity(per_trial.len());
            for (terms, _) in per_trial {
                let mut sum = 0.0;
                let mut ok = true;
                for row in &terms[k + 1 - n..=k] {
                    if row[m].is_finite() {
                        sum += row[m];
                    } else {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    window_means.push(sum / n as f64);
                }
            }
            if window_means.is_empty() {
                continue;
            }
            let count = window_means.len() as f64;
            let mean = window_means.iter().sum::<f64>() / count;
            let var = window_means
                .iter()
                .map(|w| (w - mean).powi(2))
                .sum::<f64>()
                / count;
            let se = (var / count).sqrt();
            if min_m.map_or(true, |(v, _, _)| mean < v) {
                min_m = Some((mean, m, se));
            }
        }
        if let Some((lambda_k, m, se)) = min_m {
            lambda_per_k.push((k, lambda_k));
            if best.map_or(true, |(v, _, _, _)| lambda_k < v) {
                best = Some((lambda_k, k, m, se));
            }
        }
    }

    let (lambda_min, bottleneck_k, bottleneck_m, stderr) = best.ok_or_else(|| {
        FidError::Diverged("every window contained a diverged filter step".into())
    })?;
    let bottleneck_ref = match reference {
        GapReference::PredictedOf(i) => Some(i),
        GapReference::Measurement => None,
    };
    Ok(DiagnosabilityReport {
        window: n,
        trials: per_trial.len(),
        lambda_per_k,
        lambda_min,
        bottleneck_k,
        bottleneck_pair: (bottleneck_ref, bottleneck_m),
        stderr,
        diverged_steps,
        total_steps,
    })
}
