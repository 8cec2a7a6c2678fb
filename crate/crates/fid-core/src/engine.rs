//! Windowed Bayesian fault identification.
//!
//! The engine feeds every hypothesis filter the shared control/measurement
//! stream and maintains a moving window of the last `N` innovation records.
//! Once the window has absorbed `N` measurements (step `k >= N - 1`), each
//! step runs:
//!
//! 1. a two-sided chi-square test on the mean innovation statistic
//!    `chi_bar = (1/N) sum e' S^-1 e`, rejecting hypotheses whose statistic
//!    falls outside `[chi2inv(a/2, n_y N)/N, chi2inv(1 - a/2, n_y N)/N]`
//!    with `a` the significance level;
//! 2. a Bayes update of the belief with the windowed log-likelihoods,
//!    where rejected (or diverged) hypotheses contribute zero likelihood;
//! 3. renormalization to the uniform belief when every hypothesis was
//!    rejected at once, so the posterior stays on the simplex.
//!
//! The run ends the first time some belief entry exceeds the decision
//! threshold (that hypothesis is identified) or when the step budget is
//! exhausted (the null decision). All arithmetic is in log space with
//! max-subtraction; a plain product of window densities underflows once
//! `n_y * N` grows past a few dozen.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{FidError, Result};
use crate::filter::{FilterBank, FilterConfig, StepRecord};
use crate::linalg;
use crate::models::Scenario;
use crate::stats;
use crate::FidRng;

/// Tolerance on belief-simplex membership checks.
const SIMPLEX_TOL: f64 = 1e-9;

/// Identification run parameters.
#[derive(Clone, Debug)]
pub struct EngineConfig {
    /// Window length `N` (measurements per windowed statistic).
    pub window: usize,
    /// Last step index `K`; the run spans `k = 0..=K`. `None` takes the
    /// scenario horizon.
    pub horizon: Option<usize>,
    /// Chi-square significance level.
    pub alpha: f64,
    /// Belief threshold for identification.
    pub b_th: f64,
    /// Ablation: skip the total-rejection renormalization (a belief that
    /// collapses to all zeros is then left unchanged from the prior step).
    pub no_renorm: bool,
    /// Ablation: skip the chi-square rejection test entirely.
    pub no_reject: bool,
    /// Initial belief; uniform when absent.
    pub belief_init: Option<Vec<f64>>,
    pub filter: FilterConfig,
    /// Record a per-step trace in the returned run.
    pub record_trace: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            window: 10,
            horizon: None,
            alpha: 0.05,
            b_th: 0.95,
            no_renorm: false,
            no_reject: false,
            belief_init: None,
            filter: FilterConfig::default(),
            record_trace: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self, n_hyp: usize) -> Result<()> {
        if n_hyp == 0 {
            return Err(FidError::Empty("hypothesis set"));
        }
        if self.window == 0 {
            return Err(FidError::Config("window length must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(FidError::OutOfRange {
                context: "engine config",
                name: "alpha",
                value: self.alpha,
                bounds: "(0, 1)",
            });
        }
        let floor = 1.0 / n_hyp as f64;
        if !(self.b_th >= floor && self.b_th <= 1.0) {
            return Err(FidError::OutOfRange {
                context: "engine config",
                name: "b_th",
                value: self.b_th,
                bounds: "[1/|M|, 1]",
            });
        }
        if let Some(b0) = &self.belief_init {
            Belief::from_slice(b0)?;
            if b0.len() != n_hyp {
                return Err(FidError::DimensionMismatch {
                    context: "initial belief",
                    expected: n_hyp,
                    actual: b0.len(),
                });
            }
        }
        Ok(())
    }

    pub fn effective_horizon(&self, scenario: &Scenario) -> usize {
        self.horizon.unwrap_or(scenario.horizon())
    }
}

/// Posterior over hypotheses; entries stay in `[0, 1]` and sum to one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Belief(Vec<f64>);

impl Belief {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn from_slice(b: &[f64]) -> Result<Self> {
        if b.is_empty() {
            return Err(FidError::Empty("belief"));
        }
        let sum: f64 = b.iter().sum();
        if b.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(FidError::Config(
                "belief must be a nonnegative vector summing to 1".into(),
            ));
        }
        Ok(Self(b.iter().map(|v| v / sum).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, m: usize) -> f64 {
        self.0[m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest entry; exact ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (m, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = m;
            }
        }
        best
    }

    pub fn max_value(&self) -> f64 {
        self.0[self.argmax()]
    }
}

/// One hypothesis's record of one windowed step.
#[derive(Clone, Debug)]
pub enum WindowEntry {
    Valid {
        k: usize,
        innovation: DVector<f64>,
        s: DMatrix<f64>,
        stat: f64,
        loglik: f64,
    },
    /// The filter produced no usable record at this step.
    Diverged { k: usize },
}

/// What one hypothesis's current window supports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WindowSummary {
    /// Fewer than `N` measurements absorbed; the information set is empty.
    Pending,
    /// Some step in the window came from a diverged filter.
    Diverged,
    Ready { chi_bar: f64, log_lik: f64 },
}

/// Moving window of the last `N` innovation records, ring-buffered per
/// hypothesis and index-aligned on the step counter.
#[derive(Clone, Debug)]
pub struct Window {
    capacity: usize,
    entries: Vec<VecDeque<WindowEntry>>,
    /// Shared per-step metadata `(k, u, y)`.
    steps: VecDeque<(usize, Option<DVector<f64>>, DVector<f64>)>,
    absorbed: usize,
}

impl Window {
    pub fn new(capacity: usize, n_hyp: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(FidError::Config("window capacity must be at least 1".into()));
        }
        if n_hyp == 0 {
            return Err(FidError::Empty("hypothesis set"));
        }
        Ok(Self {
            capacity,
            entries: vec![VecDeque::with_capacity(capacity); n_hyp],
            steps: VecDeque::with_capacity(capacity),
            absorbed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total measurements absorbed since the start of the run.
    pub fn absorbed(&self) -> usize {
        self.absorbed
    }

    /// The window is full (the information set is nonempty) once `N`
    /// measurements have been absorbed, i.e. from step `k = N - 1` on.
    pub fn is_full(&self) -> bool {
        self.absorbed >= self.capacity
    }

    pub fn push(
        &mut self,
        k: usize,
        u: Option<&DVector<f64>>,
        y: &DVector<f64>,
        records: &[Option<StepRecord>],
    ) {
        assert_eq!(records.len(), self.entries.len(), "record/hypothesis mismatch");
        for (deque, record) in self.entries.iter_mut().zip(records) {
            if deque.len() == self.capacity {
                deque.pop_front();
            }
            deque.push_back(match record {
                Some(r) => WindowEntry::Valid {
                    k,
                    innovation: r.innovation.clone(),
                    s: r.s.clone(),
                    stat: r.stat,
                    loglik: r.loglik,
                },
                None => WindowEntry::Diverged { k },
            });
        }
        if self.steps.len() == self.capacity {
            self.steps.pop_front();
        }
        self.steps.push_back((k, u.cloned(), y.clone()));
        self.absorbed += 1;
    }

    pub fn summary(&self, m: usize) -> WindowSummary {
        if !self.is_full() {
            return WindowSummary::Pending;
        }
        let mut stat_sum = 0.0;
        let mut loglik_sum = 0.0;
        for entry in &self.entries[m] {
            match entry {
                WindowEntry::Diverged { .. } => return WindowSummary::Diverged,
                WindowEntry::Valid { stat, loglik, .. } => {
                    stat_sum += stat;
                    loglik_sum += loglik;
                }
            }
        }
        WindowSummary::Ready {
            chi_bar: stat_sum / self.capacity as f64,
            log_lik: loglik_sum,
        }
    }

    /// Windowed log-likelihood for hypothesis `m`: `None` while the window
    /// is filling, negative infinity when any step in it came from a
    /// diverged filter.
    pub fn log_likelihood(&self, m: usize) -> Option<f64> {
        match self.summary(m) {
            WindowSummary::Pending => None,
            WindowSummary::Diverged => Some(f64::NEG_INFINITY),
            WindowSummary::Ready { log_lik, .. } => Some(log_lik),
        }
    }

    /// Innovation statistics currently in hypothesis `m`'s window, for the
    /// running-mean divergence check.
    pub fn recent_stats(&self, m: usize) -> Vec<f64> {
        self.entries[m]
            .iter()
            .filter_map(|e| match e {
                WindowEntry::Valid { stat, .. } => Some(*stat),
                WindowEntry::Diverged { .. } => None,
            })
            .collect()
    }
}

/// Per-window two-sided chi-square acceptance interval on the mean
/// statistic: `chi_bar` must land in `[chi2inv(a/2, n_y N)/N,
/// chi2inv(1 - a/2, n_y N)/N]`.
#[derive(Clone, Copy, Debug)]
pub struct RejectionBounds {
    pub lower: f64,
    pub upper: f64,
}

impl RejectionBounds {
    pub fn new(window: usize, n_y: usize, alpha: f64) -> Result<Self> {
        if window == 0 || n_y == 0 {
            return Err(FidError::Config(
                "rejection bounds need window >= 1 and n_y >= 1".into(),
            ));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(FidError::OutOfRange {
                context: "rejection bounds",
                name: "alpha",
                value: alpha,
                bounds: "(0, 1)",
            });
        }
        // The quantile routine self-checks against published tables once per
        // process before its first real use.
        stats::validate_quantile_tables()?;
        let dof = (window * n_y) as f64;
        let n = window as f64;
        Ok(Self {
            lower: stats::chi2inv(alpha / 2.0, dof)? / n,
            upper: stats::chi2inv(1.0 - alpha / 2.0, dof)? / n,
        })
    }

    pub fn rejects(&self, chi_bar: f64) -> bool {
        chi_bar < self.lower || chi_bar > self.upper
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestOutcome {
    Accept,
    Reject,
}

/// Two-sided chi-square consistency test on a windowed mean innovation
/// statistic.
pub fn hypothesis_test(
    chi_bar: f64,
    window: usize,
    n_y: usize,
    alpha: f64,
) -> Result<TestOutcome> {
    if !chi_bar.is_finite() || chi_bar < 0.0 {
        return Err(FidError::OutOfRange {
            context: "hypothesis test",
            name: "chi_bar",
            value: chi_bar,
            bounds: "[0, inf)",
        });
    }
    let bounds = RejectionBounds::new(window, n_y, alpha)?;
    Ok(if bounds.rejects(chi_bar) {
        TestOutcome::Reject
    } else {
        TestOutcome::Accept
    })
}

/// Bayes update of the belief from per-hypothesis window log-likelihoods
/// (negative infinity marks a rejected hypothesis).
///
/// When every hypothesis is rejected at once the belief renormalizes to
/// uniform, keeping the posterior well defined; `no_renorm` disables that
/// branch (the belief is then left unchanged). If the posterior mass is zero
/// without a total rejection (all surviving hypotheses sat on zero prior
/// mass), the belief is also left unchanged, as no normalizable posterior
/// exists.
pub fn belief_update(prior: &Belief, log_liks: &[f64], no_renorm: bool) -> Belief {
    assert_eq!(prior.len(), log_liks.len(), "belief/likelihood mismatch");
    let max = log_liks
        .iter()
        .copied()
        .filter(|l| l.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // Every hypothesis rejected this step.
        return if no_renorm {
            prior.clone()
        } else {
            Belief::uniform(prior.len())
        };
    }
    let weights: Vec<f64> = prior
        .as_slice()
        .iter()
        .zip(log_liks)
        .map(|(b, l)| {
            if l.is_finite() {
                b * (l - max).exp()
            } else {
                0.0
            }
        })
        .collect();
    let z: f64 = weights.iter().sum();
    if z > 0.0 {
        Belief(weights.into_iter().map(|w| w / z).collect())
    } else {
        prior.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Outcome {
    /// Belief in this hypothesis crossed the threshold.
    Identified(usize),
    /// No belief crossed the threshold within the step budget.
    Null,
}

#[derive(Clone, Debug, Serialize)]
pub struct Decision {
    pub outcome: Outcome,
    /// Step index at which the run ended.
    pub step: usize,
    pub belief: Belief,
}

/// Per-hypothesis filter snapshot in the optional trace, for debug output.
#[derive(Clone, Debug, Serialize)]
pub struct FilterTrace {
    /// Posterior state estimate after this step's update.
    pub x_hat: Vec<f64>,
    /// Trace of the posterior covariance.
    pub cov_trace: f64,
    /// Innovation statistic `e' S^-1 e`; absent for diverged filters, whose
    /// stored records go stale.
    pub stat: Option<f64>,
}

/// One step of the optional per-run trace.
#[derive(Clone, Debug, Serialize)]
pub struct TraceStep {
    pub k: usize,
    pub belief: Vec<f64>,
    pub rejected: Vec<bool>,
    /// Mean windowed statistic per hypothesis; absent while the window fills
    /// or for diverged filters.
    pub chi_bar: Vec<Option<f64>>,
    /// Control applied entering this step; absent at `k = 0`.
    pub u: Option<Vec<f64>>,
    /// For actively selected controls, whether the separation objective
    /// discriminated between hypotheses (`false` marks a nominal fallback).
    /// `None` for passive controls and at `k = 0`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub informative: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision: Option<Outcome>,
    /// Per-hypothesis filter snapshots, aligned with the hypothesis set.
    pub filters: Vec<FilterTrace>,
}

/// A control chosen for the next step, plus how it was chosen: active
/// selectors report whether the separation objective was informative,
/// passive policies leave the flag unset.
#[derive(Clone, Debug)]
pub struct ControlChoice {
    pub u: DVector<f64>,
    pub informative: Option<bool>,
}

impl ControlChoice {
    /// A policy-supplied control with no selection metadata.
    pub fn nominal(u: DVector<f64>) -> Self {
        Self {
            u,
            informative: None,
        }
    }
}

/// Everything one identification run produced.
#[derive(Clone, Debug)]
pub struct TrialRun {
    pub decision: Decision,
    /// Populated only when [`EngineConfig::record_trace`] is set.
    pub trace: Vec<TraceStep>,
    /// Measurements absorbed.
    pub steps_run: usize,
    /// Final per-hypothesis divergence flags.
    pub diverged: Vec<bool>,
}

/// Shared identification loop. `select_control` supplies `u_k` after the
/// step-`k` belief update; passive runs delegate to the scenario policy and
/// active runs optimize over the admissible set. Controls are clamped to the
/// admissible box before use.
pub(crate) fn run_identification<F>(
    scenario: &Scenario,
    config: &EngineConfig,
    rng: &mut FidRng,
    mut select_control: F,
) -> Result<TrialRun>
where
    F: FnMut(&mut FilterBank, &Belief, usize) -> Result<ControlChoice>,
{
    let hyp = scenario.hypotheses();
    config.validate(hyp.len())?;
    let k_last = config.effective_horizon(scenario);

    let truth_model = &scenario.truth().model;
    let mut bank = FilterBank::new(hyp, scenario.x0_mean(), scenario.x0_cov(), config.filter)?;
    let mut window = Window::new(config.window, hyp.len())?;
    let bounds = RejectionBounds::new(config.window, hyp.n_y(), config.alpha)?;
    let mut belief = match &config.belief_init {
        Some(b0) => Belief::from_slice(b0)?,
        None => Belief::uniform(hyp.len()),
    };

    let mut x = scenario.draw_x0(rng);
    let mut u_next: Option<ControlChoice> = None;
    let mut decision: Option<Decision> = None;
    let mut trace = Vec::new();
    let mut steps_run = 0;

    for k in 0..=k_last {
        let (u_applied, u_informative) = match u_next.take() {
            Some(choice) => {
                x = truth_model.step_dynamics(&x, &choice.u, rng)?;
                (Some(choice.u), choice.informative)
            }
            None => (None, None),
        };
        // A blown-up true system is a simulation failure, not a filter
        // event; callers redraw the trial rather than scoring it.
        if !linalg::all_finite_vec(&x) {
            return Err(FidError::NonFinite("true-state simulation"));
        }
        let y = truth_model.measure(&x, rng)?;
        if !linalg::all_finite_vec(&y) {
            return Err(FidError::NonFinite("true-measurement simulation"));
        }
        let records = bank.step(hyp, u_applied.as_ref(), &y);
        window.push(k, u_applied.as_ref(), &y, &records);
        steps_run = k + 1;

        let mut rejected = vec![false; hyp.len()];
        let mut chi_bars = vec![None; hyp.len()];
        if window.is_full() {
            let mut logliks = vec![f64::NEG_INFINITY; hyp.len()];
            for m in 0..hyp.len() {
                match window.summary(m) {
                    WindowSummary::Pending => unreachable!("window reported full"),
                    WindowSummary::Diverged => rejected[m] = true,
                    WindowSummary::Ready { chi_bar, log_lik } => {
                        chi_bars[m] = Some(chi_bar);
                        if !config.no_reject && bounds.rejects(chi_bar) {
                            rejected[m] = true;
                        } else {
                            logliks[m] = log_lik;
                        }
                    }
                }
            }
            belief = belief_update(&belief, &logliks, config.no_renorm);
            // Flag filters whose windowed statistics are blowing up; they
            // stop producing records from the next step on.
            for m in 0..hyp.len() {
                let recent = window.recent_stats(m);
                bank.filter_mut(m).check_divergence(&recent, &config.filter);
            }
            if belief.max_value() > config.b_th {
                decision = Some(Decision {
                    outcome: Outcome::Identified(belief.argmax()),
                    step: k,
                    belief: belief.clone(),
                });
            }
        }

        if config.record_trace {
            let filters = (0..hyp.len())
                .map(|m| {
                    let f = bank.filter(m);
                    FilterTrace {
                        x_hat: f.mean().iter().copied().collect(),
                        cov_trace: f.covariance().trace(),
                        stat: if f.diverged() {
                            None
                        } else {
                            f.last_record().map(|r| r.stat)
                        },
                    }
                })
                .collect();
            trace.push(TraceStep {
                k,
                belief: belief.as_slice().to_vec(),
                rejected,
                chi_bar: chi_bars,
                u: u_applied.as_ref().map(|u| u.iter().copied().collect()),
                informative: u_informative,
                decision: decision.as_ref().map(|d| d.outcome),
                filters,
            });
        }
        if decision.is_some() {
            break;
        }
        if k < k_last {
            let mut choice = select_control(&mut bank, &belief, k)?;
            if choice.u.len() != hyp.n_u() {
                return Err(FidError::DimensionMismatch {
                    context: "selected control",
                    expected: hyp.n_u(),
                    actual: choice.u.len(),
                });
            }
            scenario.admissible().clamp(&mut choice.u);
            u_next = Some(choice);
        }
    }

    let decision = decision.unwrap_or(Decision {
        outcome: Outcome::Null,
        step: k_last,
        belief: belief.clone(),
    });
    Ok(TrialRun {
        decision,
        trace,
        steps_run,
        diverged: bank.filters().iter().map(|f| f.diverged()).collect(),
    })
}

/// Passive identification: controls come from the scenario's nominal
/// policy, with feedback policies fed the most-believed hypothesis's state
/// estimate.
pub fn passive_fid_run(
    scenario: &Scenario,
    config: &EngineConfig,
    rng: &mut FidRng,
) -> Result<TrialRun> {
    let policy = scenario.policy().clone();
    run_identification(scenario, config, rng, move |bank, belief, k| {
        let x_ref = bank.filter(belief.argmax()).mean().clone();
        Ok(ControlChoice::nominal(policy.control(&x_ref, k)))
    })
}

/// The trial-level failure indicator: 1 when a modeled truth was not
/// correctly identified, or an unmodeled truth was identified as anything
/// but null.
pub fn failure_indicator(decision: &Decision, truth_index: Option<usize>) -> u8 {
    let failed = match (decision.outcome, truth_index) {
        (Outcome::Identified(m), Some(h)) => m != h,
        (Outcome::Null, Some(_)) => true,
        (Outcome::Identified(_), None) => true,
        (Outcome::Null, None) => false,
    };
    failed as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{gaussian_log_density, innovation_stat};
    use crate::linalg;
    use crate::models::{
        build_scenario, ControlPolicy, ScenarioConfig, ScenarioKind, Truth,
    };
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Builds a step record the way the filter would, from a raw
    /// innovation/covariance pair.
    fn record_from(e: DVector<f64>, s: DMatrix<f64>) -> StepRecord {
        let stat = innovation_stat(&e, &s).unwrap();
        let chol = linalg::cholesky_spd(&s, "test").unwrap();
        let loglik = gaussian_log_density(stat, linalg::log_det(&chol), e.len());
        StepRecord {
            y_pred: DVector::zeros(e.len()),
            innovation: e,
            s,
            stat,
            loglik,
        }
    }

    fn push_scalar(window: &mut Window, k: usize, e: f64, s: f64) {
        let record = record_from(
            DVector::from_element(1, e),
            DMatrix::from_element(1, 1, s),
        );
        let y = DVector::zeros(1);
        window.push(k, None, &y, &[Some(record)]);
    }

    #[test]
    fn window_is_empty_before_n_measurements() {
        let mut window = Window::new(5, 1).unwrap();
        for k in 0..4 {
            push_scalar(&mut window, k, 0.1, 1.0);
            assert_eq!(window.summary(0), WindowSummary::Pending);
            assert!(window.log_likelihood(0).is_none());
        }
        push_scalar(&mut window, 4, 0.1, 1.0);
        assert!(window.is_full());
        assert!(matches!(window.summary(0), WindowSummary::Ready { .. }));
    }

    #[test]
    fn window_log_likelihood_trivial_values() {
        // One standard-normal innovation at zero.
        let mut w1 = Window::new(1, 1).unwrap();
        push_scalar(&mut w1, 0, 0.0, 1.0);
        assert_relative_eq!(
            w1.log_likelihood(0).unwrap(),
            -0.9189385332046727,
            epsilon = 1e-12
        );
        // Two of them sum.
        let mut w2 = Window::new(2, 1).unwrap();
        push_scalar(&mut w2, 0, 0.0, 1.0);
        push_scalar(&mut w2, 1, 0.0, 1.0);
        assert_relative_eq!(
            w2.log_likelihood(0).unwrap(),
            -1.8378770664093453,
            epsilon = 1e-12
        );
    }

    #[test]
    fn window_likelihood_matches_density_product_oracle() {
        // exp(window log-likelihood) must equal the direct product of
        // multivariate normal densities, inverses and determinants computed
        // explicitly.
        let mut rng = crate::FidRng::seed_from_u64(17);
        let n = 4;
        let mut window = Window::new(n, 1).unwrap();
        let mut direct_product = 1.0_f64;
        for k in 0..n {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let s = &a * a.transpose() + DMatrix::identity(2, 2);
            let e = DVector::from_fn(2, |_, _| rng.random_range(-1.5..1.5));
            let det: f64 = s.determinant();
            let quad: f64 = (s.clone().try_inverse().unwrap() * &e).dot(&e);
            let dim = 2.0_f64;
            direct_product *= (-0.5 * quad).exp()
                / ((2.0 * std::f64::consts::PI).powf(dim / 2.0) * det.sqrt());
            let record = record_from(e, s);
            let y = DVector::zeros(2);
            window.push(k, None, &y, &[Some(record)]);
        }
        let ll = window.log_likelihood(0).unwrap();
        assert_relative_eq!(ll.exp(), direct_product, max_relative = 1e-10);
    }

    #[test]
    fn window_with_diverged_step_rejects() {
        let mut window = Window::new(2, 1).unwrap();
        push_scalar(&mut window, 0, 0.0, 1.0);
        let y = DVector::zeros(1);
        window.push(1, None, &y, &[None]);
        assert_eq!(window.summary(0), WindowSummary::Diverged);
        assert_eq!(window.log_likelihood(0), Some(f64::NEG_INFINITY));
        // Two more valid steps push the diverged entry out.
        push_scalar(&mut window, 2, 0.0, 1.0);
        push_scalar(&mut window, 3, 0.0, 1.0);
        assert!(matches!(window.summary(0), WindowSummary::Ready { .. }));
    }

    #[test]
    fn hypothesis_test_brackets_the_mean() {
        // chi2inv(0.025, 25)/25 ~ 0.525 and chi2inv(0.975, 25)/25 ~ 1.626
        // bracket a mean statistic of n_y = 1.
        let bounds = RejectionBounds::new(25, 1, 0.05).unwrap();
        assert_relative_eq!(bounds.lower, 13.1197 / 25.0, max_relative = 1e-4);
        assert_relative_eq!(bounds.upper, 40.6465 / 25.0, max_relative = 1e-4);
        assert_eq!(hypothesis_test(1.0, 25, 1, 0.05).unwrap(), TestOutcome::Accept);
        assert_eq!(hypothesis_test(0.0, 25, 1, 0.05).unwrap(), TestOutcome::Reject);
        assert_eq!(
            hypothesis_test(10.0, 25, 1, 0.05).unwrap(),
            TestOutcome::Reject
        );
        assert!(hypothesis_test(1.0, 25, 1, 1.5).is_err());
        assert!(hypothesis_test(-0.1, 25, 1, 0.05).is_err());
    }

    #[test]
    fn belief_update_handles_total_rejection() {
        let prior = Belief::from_slice(&[0.7, 0.1, 0.1, 0.1]).unwrap();
        let all_rejected = vec![f64::NEG_INFINITY; 4];
        let posterior = belief_update(&prior, &all_rejected, false);
        for m in 0..4 {
            assert_relative_eq!(posterior.get(m), 0.25, epsilon = 1e-15);
        }
        // The ablation keeps the prior instead.
        let kept = belief_update(&prior, &all_rejected, true);
        assert_eq!(kept, prior);
    }

    #[test]
    fn belief_update_matches_hand_posteriors() {
        // Equal likelihoods leave the prior untouched.
        let prior = Belief::from_slice(&[0.6, 0.3, 0.1]).unwrap();
        let equal = vec![-3.0, -3.0, -3.0];
        let posterior = belief_update(&prior, &equal, false);
        for m in 0..3 {
            assert_relative_eq!(posterior.get(m), prior.get(m), epsilon = 1e-14);
        }
        // A log-likelihood gap of ln 3 from a uniform prior gives 3:1 odds.
        let uniform = Belief::uniform(2);
        let lls = vec![3.0_f64.ln() - 10.0, -10.0];
        let posterior = belief_update(&uniform, &lls, false);
        assert_relative_eq!(posterior.get(0), 0.75, epsilon = 1e-12);
        assert_relative_eq!(posterior.get(1), 0.25, epsilon = 1e-12);
        // Rejected hypotheses take exactly zero mass.
        let lls = vec![-1.0, f64::NEG_INFINITY];
        let posterior = belief_update(&uniform, &lls, false);
        assert_eq!(posterior.get(1), 0.0);
        assert_relative_eq!(posterior.get(0), 1.0, epsilon = 1e-15);
        // Zero prior mass is absorbing while any hypothesis survives.
        let prior = Belief::from_slice(&[0.0, 1.0]).unwrap();
        let lls = vec![5.0, -5.0];
        let posterior = belief_update(&prior, &lls, false);
        assert_eq!(posterior.get(0), 0.0);
    }

    proptest! {
        /// Posterior stays on the simplex and rejected entries are zeroed
        /// for every mix of priors and (possibly infinite) log-likelihoods.
        #[test]
        fn belief_update_stays_on_simplex(
            raw in proptest::collection::vec(0.01f64..10.0, 2..6),
            lls_raw in proptest::collection::vec((-50.0f64..50.0, proptest::bool::ANY), 2..6),
            no_renorm in proptest::bool::ANY,
        ) {
            let n = raw.len().min(lls_raw.len());
            let total: f64 = raw[..n].iter().sum();
            let prior = Belief::from_slice(
                &raw[..n].iter().map(|v| v / total).collect::<Vec<_>>(),
            ).unwrap();
            let lls: Vec<f64> = lls_raw[..n]
                .iter()
                .map(|(l, reject)| if *reject { f64::NEG_INFINITY } else { *l })
                .collect();
            let posterior = belief_update(&prior, &lls, no_renorm);

            let sum: f64 = posterior.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
            for v in posterior.as_slice() {
                prop_assert!(*v >= 0.0 && *v <= 1.0 + 1e-15);
            }
            let all_rejected = lls.iter().all(|l| !l.is_finite());
            if all_rejected && !no_renorm {
                for v in posterior.as_slice() {
                    prop_assert!((v - 1.0 / n as f64).abs() < 1e-12);
                }
            }
            if !all_rejected {
                // Renormalization must not fire: rejected entries are zero
                // whenever the posterior was renormalizable.
                let z: f64 = prior
                    .as_slice()
                    .iter()
                    .zip(&lls)
                    .filter(|(_, l)| l.is_finite())
                    .map(|(b, _)| b)
                    .sum();
                if z > 0.0 {
                    for (v, l) in posterior.as_slice().iter().zip(&lls) {
                        if !l.is_finite() {
                            prop_assert!(*v == 0.0);
                        }
                    }
                }
            }
        }
    }

    fn separated_scenario() -> Scenario {
        let mut cfg = ScenarioConfig::default_for(ScenarioKind::Custom);
        cfg.pi_star = 1.0;
        build_scenario(ScenarioKind::Custom, &cfg).unwrap()
    }

    #[test]
    fn separated_hypotheses_identify_quickly() {
        // Scalar gains 1 vs 5 under a constant input separate almost
        // immediately; require 99 of 100 seeded runs to identify the truth.
        let scenario = separated_scenario();
        let truth = Truth {
            model: scenario.hypotheses()[0].clone(),
            index: Some(0),
        };
        let scenario = scenario.with_truth(truth).unwrap();
        let config = EngineConfig {
            window: 5,
            horizon: Some(200),
            ..EngineConfig::default()
        };
        let mut hits = 0;
        for seed in 0..100u64 {
            let mut rng = crate::FidRng::seed_from_u64(1000 + seed);
            let run = passive_fid_run(&scenario, &config, &mut rng).unwrap();
            if run.decision.outcome == Outcome::Identified(0) && run.decision.step < 200 {
                hits += 1;
            }
        }
        assert!(hits >= 99, "only {hits}/100 runs identified the truth");
    }

    #[test]
    fn example1_passive_run_returns_null() {
        // With the second input pinned at zero the hypotheses predict
        // identical measurements, so no belief can cross the threshold.
        let cfg = ScenarioConfig::default_for(ScenarioKind::Example1);
        let scenario = build_scenario(ScenarioKind::Example1, &cfg).unwrap();
        let config = EngineConfig {
            window: 10,
            horizon: Some(100),
            ..EngineConfig::default()
        };
        let mut rng = crate::FidRng::seed_from_u64(7);
        let run = passive_fid_run(&scenario, &config, &mut rng).unwrap();
        assert_eq!(run.decision.outcome, Outcome::Null);
        // Belief stays essentially uniform over the pair.
        assert!((run.decision.belief.get(0) - 0.5).abs() < 0.2);
    }

    #[test]
    fn short_horizon_never_fills_window() {
        let scenario = separated_scenario();
        let config = EngineConfig {
            window: 10,
            horizon: Some(5),
            record_trace: true,
            ..EngineConfig::default()
        };
        let mut rng = crate::FidRng::seed_from_u64(3);
        let run = passive_fid_run(&scenario, &config, &mut rng).unwrap();
        assert_eq!(run.decision.outcome, Outcome::Null);
        for step in &run.trace {
            assert!(step.chi_bar.iter().all(|c| c.is_none()));
        }
    }

    #[test]
    fn runs_are_deterministic_in_the_seed() {
        let scenario = separated_scenario();
        let config = EngineConfig {
            window: 5,
            record_trace: true,
            ..EngineConfig::default()
        };
        let run = |seed: u64| {
            let mut rng = crate::FidRng::seed_from_u64(seed);
            passive_fid_run(&scenario, &config, &mut rng).unwrap()
        };
        let a = run(99);
        let b = run(99);
        assert_eq!(a.decision.outcome, b.decision.outcome);
        assert_eq!(a.decision.step, b.decision.step);
        assert_eq!(a.decision.belief, b.decision.belief);
        assert_eq!(a.trace.len(), b.trace.len());
        for (sa, sb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(sa.belief, sb.belief);
            assert_eq!(sa.rejected, sb.rejected);
        }
    }

    #[test]
    fn failure_indicator_truth_table() {
        let decision = |outcome| Decision {
            outcome,
            step: 10,
            belief: Belief::uniform(2),
        };
        // Correct identification and correct null are successes.
        assert_eq!(failure_indicator(&decision(Outcome::Identified(1)), Some(1)), 0);
        assert_eq!(failure_indicator(&decision(Outcome::Null), None), 0);
        // Misidentification, missed fault, and false alarm on unmodeled
        // truth all fail.
        assert_eq!(failure_indicator(&decision(Outcome::Identified(0)), Some(1)), 1);
        assert_eq!(failure_indicator(&decision(Outcome::Null), Some(1)), 1);
        assert_eq!(failure_indicator(&decision(Outcome::Identified(0)), None), 1);
    }

    #[test]
    fn config_validation_rejects_bad_parameters() {
        let mut config = EngineConfig::default();
        assert!(config.validate(4).is_ok());
        config.alpha = 0.0;
        assert!(config.validate(4).is_err());
        config.alpha = 0.05;
        config.b_th = 0.1;
        assert!(config.validate(4).is_err(), "b_th below 1/|M| must fail");
        config.b_th = 0.95;
        config.window = 0;
        assert!(config.validate(4).is_err());
        config.window = 10;
        config.belief_init = Some(vec![0.5, 0.6]);
        assert!(config.validate(2).is_err(), "non-simplex init must fail");
    }

    #[test]
    fn feedback_policy_receives_estimated_state() {
        // A feedback policy that echoes its input lets the test observe
        // which state the engine feeds it.
        let cfg = ScenarioConfig::default_for(ScenarioKind::Custom);
        let scenario = build_scenario(ScenarioKind::Custom, &cfg).unwrap();
        let scenario = scenario.with_policy(ControlPolicy::Feedback(std::sync::Arc::new(
            |x: &DVector<f64>, _k| x.clone() * 0.1,
        )));
        let config = EngineConfig {
            window: 3,
            horizon: Some(20),
            record_trace: true,
            ..EngineConfig::default()
        };
        let mut rng = crate::FidRng::seed_from_u64(12);
        let run = passive_fid_run(&scenario, &config, &mut rng).unwrap();
        // Controls in the trace must be clamped into the admissible box.
        for step in &run.trace {
            if let Some(u) = &step.u {
                for (axis, v) in u.iter().enumerate() {
                    assert!(*v >= scenario.admissible().lower(axis) - 1e-12);
                    assert!(*v <= scenario.admissible().upper(axis) + 1e-12);
                }
            }
        }
    }
}
