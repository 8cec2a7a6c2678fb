//! Monte Carlo experiment driver.
//!
//! Experiments sweep a grid of window lengths and measurement-noise scales
//! for one scenario and mode, running many randomized trials per point:
//! each trial draws the true fault (modeled with probability `pi_star`),
//! draws the initial state from the prior, simulates the closed loop, and
//! scores the decision with the failure indicator. Everything is a pure
//! function of the master seed — per-trial seeds are derived up front with
//! a SplitMix64-style hash of the (sweep point, trial, redraw attempt)
//! path, so results are bit-identical across runs and across however many
//! worker threads execute the trials.
//!
//! The sweep writes `sweep.csv` (one row per point; the CSV is the
//! contract) and `summary.json` (configuration echo plus full metrics),
//! with optional per-trial traces under `traces/`.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::active::{active_fid_run, ActiveConfig};
use crate::engine::{
    failure_indicator, passive_fid_run, Decision, EngineConfig, Outcome, TraceStep,
};
use crate::error::{FidError, Result};
use crate::models::{build_scenario_from_config, Scenario, ScenarioConfig};
use crate::FidRng;

/// Re-draw budget for trials whose simulation blows up.
const MAX_TRIAL_ATTEMPTS: u32 = 3;

/// Identification mode of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Controls come from the scenario's nominal policy.
    Passive,
    /// Controls maximize the pairwise-separation objective.
    Active,
}

impl FromStr for Mode {
    type Err = FidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "passive" => Ok(Self::Passive),
            "active" => Ok(Self::Active),
            other => Err(FidError::Config(format!(
                "unknown mode `{other}` (expected `passive` or `active`)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Passive => "passive",
            Self::Active => "active",
        })
    }
}

/// A full experiment description: scenario, mode, sweep grid, decision
/// parameters, ablation switches, and the master seed. Serializable so a
/// JSON file plus CLI overrides fully determines a run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Experiment name; the output directory component.
    pub name: String,
    pub mode: Mode,
    /// Scenario family and physical parameters, including `pi_star` and the
    /// mismatch knobs. The sweep overwrites its `noise_scale` per point.
    pub scenario: ScenarioConfig,
    /// Window lengths `N` to sweep.
    pub windows: Vec<usize>,
    /// Measurement-noise multipliers to sweep.
    pub noise_scales: Vec<f64>,
    /// Trials per sweep point.
    pub trials: usize,
    pub alpha: f64,
    pub b_th: f64,
    /// Ablation: disable the total-rejection renormalization.
    pub no_renorm: bool,
    /// Ablation: disable the chi-square rejection test.
    pub no_reject: bool,
    /// Multiplies the admissible control box (authority studies).
    pub authority_scale: f64,
    /// Active selection grid resolution.
    pub grid_per_axis: usize,
    /// Active selection refinement passes.
    pub refine_iters: usize,
    pub master_seed: u64,
    /// Keep per-step traces for the first this-many trials of each point.
    pub keep_traces: usize,
    /// Last step index override; `None` uses the scenario horizon.
    pub horizon: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".to_string(),
            mode: Mode::Passive,
            scenario: ScenarioConfig::default(),
            windows: vec![5, 10, 25, 50],
            noise_scales: vec![0.5, 1.0, 2.0],
            trials: 500,
            alpha: 0.05,
            b_th: 0.95,
            no_renorm: false,
            no_reject: false,
            authority_scale: 1.0,
            grid_per_axis: 9,
            refine_iters: 1,
            master_seed: 42,
            keep_traces: 0,
            horizon: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.name.is_empty() {
            return Err(FidError::Empty("experiment name"));
        }
        if self.trials == 0 {
            return Err(FidError::Config("trials must be at least 1".into()));
        }
        if self.windows.is_empty() {
            return Err(FidError::Empty("window sweep"));
        }
        if self.windows.contains(&0) {
            return Err(FidError::Config("window length must be at least 1".into()));
        }
        if self.noise_scales.is_empty() {
            return Err(FidError::Empty("noise-scale sweep"));
        }
        if let Some(&bad) = self
            .noise_scales
            .iter()
            .find(|s| !(s.is_finite() && **s > 0.0))
        {
            return Err(FidError::OutOfRange {
                context: "ExperimentConfig",
                name: "noise_scales",
                value: bad,
                bounds: "(0, inf)",
            });
        }
        if !(self.authority_scale.is_finite() && self.authority_scale > 0.0) {
            return Err(FidError::OutOfRange {
                context: "ExperimentConfig",
                name: "authority_scale",
                value: self.authority_scale,
                bounds: "(0, inf)",
            });
        }
        self.active_config().validate()?;
        Ok(())
    }

    /// Engine parameters for one window length.
    pub fn engine_config(&self, window: usize, record_trace: bool) -> EngineConfig {
        EngineConfig {
            window,
            horizon: self.horizon,
            alpha: self.alpha,
            b_th: self.b_th,
            no_renorm: self.no_renorm,
            no_reject: self.no_reject,
            belief_init: None,
            filter: Default::default(),
            record_trace,
        }
    }

    pub fn active_config(&self) -> ActiveConfig {
        ActiveConfig {
            grid_per_axis: self.grid_per_axis,
            refine_iters: self.refine_iters,
            ..ActiveConfig::default()
        }
    }

    /// Builds the scenario for one sweep point, applying the noise scale and
    /// the authority scaling.
    pub fn point_scenario(&self, noise_scale: f64) -> Result<Scenario> {
        let mut sc = self.scenario.clone();
        sc.noise_scale = noise_scale;
        let scenario = build_scenario_from_config(&sc)?;
        if self.authority_scale != 1.0 {
            let scaled = scenario.admissible().scaled(self.authority_scale)?;
            return scenario.with_admissible(scaled);
        }
        Ok(scenario)
    }

    /// The sweep grid in evaluation order: windows outer, noise scales inner.
    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        let mut points = Vec::with_capacity(self.windows.len() * self.noise_scales.len());
        for &window in &self.windows {
            for &noise_scale in &self.noise_scales {
                points.push(SweepPoint {
                    mode: self.mode,
                    window,
                    noise_scale,
                });
            }
        }
        points
    }
}

/// Coordinates of one sweep point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub mode: Mode,
    pub window: usize,
    pub noise_scale: f64,
}

/// One scored trial.
#[derive(Clone, Debug, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    /// Seed of the attempt that produced this result.
    pub seed: u64,
    /// Redraw attempts consumed before the simulation stayed finite.
    pub redraws: u32,
    pub truth_label: String,
    /// Index of the truth in the hypothesis set; `None` for unmodeled faults.
    pub truth_index: Option<usize>,
    pub decision: Decision,
    pub failure: u8,
    /// Decision step of an identification; `None` for Null decisions.
    pub delay: Option<usize>,
    /// Final per-hypothesis filter divergence flags.
    pub diverged: Vec<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceStep>,
}

/// Aggregate metrics of one sweep point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub trials: usize,
    pub failures: usize,
    pub failure_rate: f64,
    /// Binomial standard error `sqrt(p (1-p) / trials)`.
    pub failure_stderr: f64,
    /// Failures with a modeled truth (wrong or missing identification).
    pub failures_modeled: usize,
    /// Failures with an unmodeled truth (any identification at all).
    pub failures_unmodeled: usize,
    pub identified: usize,
    pub nulls: usize,
    pub null_rate: f64,
    /// Correct identifications of a modeled truth.
    pub correct: usize,
    /// Mean decision step over correct identifications.
    pub avg_delay: Option<f64>,
    pub delay_std: Option<f64>,
    /// Redraw attempts consumed across all trials.
    pub redraws: usize,
}

impl Metrics {
    pub fn from_trials(results: &[TrialResult]) -> Self {
        let trials = results.len();
        let mut failures = 0usize;
        let mut failures_modeled = 0usize;
        let mut failures_unmodeled = 0usize;
        let mut identified = 0usize;
        let mut correct = 0usize;
        let mut redraws = 0usize;
        let mut delays = Vec::new();
        for r in results {
            redraws += r.redraws as usize;
            if r.failure == 1 {
                failures += 1;
                if r.truth_index.is_some() {
                    failures_modeled += 1;
                } else {
                    failures_unmodeled += 1;
                }
            }
            match r.decision.outcome {
                Outcome::Identified(m) => {
                    identified += 1;
                    if r.truth_index == Some(m) {
                        correct += 1;
                        delays.push(r.decision.step as f64);
                    }
                }
                Outcome::Null => {}
            }
        }
        let nulls = trials - identified;
        let p = failures as f64 / trials as f64;
        let (avg_delay, delay_std) = if delays.is_empty() {
            (None, None)
        } else {
            let mean = delays.iter().sum::<f64>() / delays.len() as f64;
            let var =
                delays.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / delays.len() as f64;
            (Some(mean), Some(var.sqrt()))
        };
        Self {
            trials,
            failures,
            failure_rate: p,
            failure_stderr: (p * (1.0 - p) / trials as f64).sqrt(),
            failures_modeled,
            failures_unmodeled,
            identified,
            nulls,
            null_rate: nulls as f64 / trials as f64,
            correct,
            avg_delay,
            delay_std,
            redraws,
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64-style seed derivation: hashes the master seed and a path of
/// stream labels (sweep point, trial index, redraw attempt) into an
/// independent seed. Pure, so parallel scheduling cannot perturb streams.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut state = mix(master.wrapping_add(0x9E37_79B9_7F4A_7C15));
    for &label in path {
        state = mix(state ^ label.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xD134_2543_DE82_EF95));
    }
    state
}

fn is_blowup(e: &FidError) -> bool {
    matches!(
        e,
        FidError::NonFinite(_) | FidError::Diverged(_) | FidError::NotSpd { .. }
    )
}

/// One randomized trial, fully determined by `seed`: draws the truth and the
/// initial state, simulates the loop in the given mode, and scores the
/// decision. Simulation blow-ups redraw with a seed derived from the attempt
/// number, up to 3 attempts; configuration errors propagate immediately.
pub fn run_trial(
    scenario: &Scenario,
    engine: &EngineConfig,
    mode: Mode,
    active: &ActiveConfig,
    trial: usize,
    seed: u64,
) -> Result<TrialResult> {
    for attempt in 0..MAX_TRIAL_ATTEMPTS {
        let attempt_seed = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, &[u64::from(attempt)])
        };
        let mut rng = FidRng::seed_from_u64(attempt_seed);
        let truth = scenario.draw_truth(&mut rng)?;
        let trial_scenario = scenario.with_truth(truth.clone())?;
        let run = match mode {
            Mode::Passive => passive_fid_run(&trial_scenario, engine, &mut rng),
            Mode::Active => active_fid_run(&trial_scenario, engine, active, &mut rng),
        };
        match run {
            Ok(run) => {
                let failure = failure_indicator(&run.decision, truth.index);
                let delay = match run.decision.outcome {
                    Outcome::Identified(_) => Some(run.decision.step),
                    Outcome::Null => None,
                };
                return Ok(TrialResult {
                    trial,
                    seed: attempt_seed,
                    redraws: attempt,
                    truth_label: truth.model.label().to_string(),
                    truth_index: truth.index,
                    decision: run.decision,
                    failure,
                    delay,
                    diverged: run.diverged,
                    trace: run.trace,
                });
            }
            Err(e) if is_blowup(&e) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(FidError::InvalidTrial {
        attempts: MAX_TRIAL_ATTEMPTS,
    })
}

/// All trials of one sweep point, in parallel with pre-derived seeds and an
/// order-preserving reduction. `point_id` keeps seed streams distinct
/// across points of the same experiment.
pub fn run_point(
    config: &ExperimentConfig,
    window: usize,
    noise_scale: f64,
    point_id: u64,
) -> Result<(Metrics, Vec<TrialResult>)> {
    config.validate()?;
    let scenario = config.point_scenario(noise_scale)?;
    let active = config.active_config();
    let seeds: Vec<u64> = (0..config.trials)
        .map(|t| derive_seed(config.master_seed, &[point_id, t as u64]))
        .collect();
    let results: Vec<TrialResult> = seeds
        .par_iter()
        .enumerate()
        .map(|(t, &seed)| {
            let engine = config.engine_config(window, t < config.keep_traces);
            run_trial(&scenario, &engine, config.mode, &active, t, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Metrics::from_trials(&results), results))
}

/// Metrics for every sweep point of the experiment, in grid order.
pub fn run_monte_carlo(config: &ExperimentConfig) -> Result<Vec<(SweepPoint, Metrics)>> {
    let mut out = Vec::new();
    for (id, point) in config.sweep_points().into_iter().enumerate() {
        let (metrics, _) = run_point(config, point.window, point.noise_scale, id as u64)?;
        out.push((point, metrics));
    }
    Ok(out)
}

/// One sweep point with its aggregate metrics.
#[derive(Clone, Debug, Serialize)]
pub struct PointReport {
    #[serde(flatten)]
    pub point: SweepPoint,
    pub metrics: Metrics,
}

/// Everything a sweep produced, echoing the configuration for provenance.
#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub points: Vec<PointReport>,
    /// Where the report files were written.
    #[serde(skip)]
    pub out_dir: PathBuf,
}

/// Runs the full sweep grid and writes the report files under
/// `out_root/{name}/`: `sweep.csv` (the contract: one row per point),
/// `summary.json`, and per-trial traces under `traces/` when
/// `keep_traces > 0`.
pub fn run_sweep(config: &ExperimentConfig, out_root: &Path) -> Result<SweepReport> {
    config.validate()?;
    let out_dir = out_root.join(&config.name);
    fs::create_dir_all(&out_dir)?;
    let traces_dir = out_dir.join("traces");
    if config.keep_traces > 0 {
        fs::create_dir_all(&traces_dir)?;
    }

    let mut points = Vec::new();
    for (id, point) in config.sweep_points().into_iter().enumerate() {
        let (metrics, results) = run_point(config, point.window, point.noise_scale, id as u64)?;
        for r in results.iter().take(config.keep_traces) {
            let file = traces_dir.join(format!(
                "w{}_s{}_t{}.json",
                point.window, point.noise_scale, r.trial
            ));
            fs::write(file, serde_json::to_string_pretty(r)?)?;
        }
        points.push(PointReport { point, metrics });
    }

    let report = SweepReport {
        config: config.clone(),
        points,
        out_dir: out_dir.clone(),
    };
    fs::write(out_dir.join("sweep.csv"), sweep_csv(&report.points))?;
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

fn sweep_csv(points: &[PointReport]) -> String {
    let mut out =
        String::from("mode,window,noise_scale,failure_rate,failure_stderr,avg_delay,null_rate\n");
    for p in points {
        let delay = p
            .metrics
            .avg_delay
            .map(|d| d.to_string())
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.point.mode,
            p.point.window,
            p.point.noise_scale,
            p.metrics.failure_rate,
            p.metrics.failure_stderr,
            delay,
            p.metrics.null_rate,
        );
    }
    out
}

/// Mismatch deltas at one sweep point.
#[derive(Clone, Debug, Serialize)]
pub struct MismatchPoint {
    #[serde(flatten)]
    pub point: SweepPoint,
    pub baseline: Metrics,
    pub perturbed: Metrics,
    /// Failure-rate increase of the perturbed runs over the matched
    /// baseline.
    pub delta: f64,
}

/// Robustness study: reruns the sweep with the configured mismatch knobs
/// against a knobs-zeroed baseline on identical seed streams, reporting the
/// failure-rate delta per point. With zero knobs the truth draws are
/// bit-identical, so the delta is exactly zero by construction.
pub fn run_mismatch_study(config: &ExperimentConfig) -> Result<Vec<MismatchPoint>> {
    let mut baseline_cfg = config.clone();
    baseline_cfg.scenario.mismatch = Default::default();
    let baseline = run_monte_carlo(&baseline_cfg)?;
    let perturbed = run_monte_carlo(config)?;
    Ok(baseline
        .into_iter()
        .zip(perturbed)
        .map(|((point, base), (_, pert))| MismatchPoint {
            point,
            delta: pert.failure_rate - base.failure_rate,
            baseline: base,
            perturbed: pert,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        build_scenario, ControlPolicy, ScenarioKind, SystemModel, Truth,
    };
    use nalgebra::{DMatrix, DVector};
    use std::collections::HashSet;
    use std::sync::Arc;

    fn custom_config(trials: usize) -> ExperimentConfig {
        let mut scenario = ScenarioConfig::default_for(ScenarioKind::Custom);
        scenario.horizon = 40;
        ExperimentConfig {
            name: "harness_test".to_string(),
            scenario,
            windows: vec![5],
            noise_scales: vec![1.0],
            trials,
            keep_traces: 0,
            ..ExperimentConfig::default()
        }
    }

    fn custom_scenario(config: &ExperimentConfig) -> Scenario {
        config.point_scenario(1.0).unwrap()
    }

    #[test]
    fn fixed_seed_reproduces_the_trial_bit_for_bit() {
        let config = custom_config(1);
        let scenario = custom_scenario(&config);
        let engine = config.engine_config(5, true);
        let active = config.active_config();
        let a = run_trial(&scenario, &engine, Mode::Passive, &active, 0, 1234).unwrap();
        let b = run_trial(&scenario, &engine, Mode::Passive, &active, 0, 1234).unwrap();
        assert_eq!(a.truth_label, b.truth_label);
        assert_eq!(a.truth_index, b.truth_index);
        assert_eq!(a.decision.outcome, b.decision.outcome);
        assert_eq!(a.decision.step, b.decision.step);
        assert_eq!(a.decision.belief.as_slice(), b.decision.belief.as_slice());
        assert_eq!(a.failure, b.failure);
        assert_eq!(a.redraws, b.redraws);
        assert_eq!(a.trace.len(), b.trace.len());
        for (sa, sb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(sa.belief, sb.belief);
            assert_eq!(sa.u, sb.u);
        }
    }

    #[test]
    fn pi_star_one_always_draws_a_modeled_truth() {
        let mut config = custom_config(15);
        config.scenario.pi_star = 1.0;
        let (_, results) = run_point(&config, 5, 1.0, 0).unwrap();
        assert!(results.iter().all(|r| r.truth_index.is_some()));
    }

    #[test]
    fn unmodeled_truths_fail_exactly_when_identified() {
        let mut config = custom_config(20);
        config.scenario.pi_star = 0.0;
        config.no_reject = true;
        config.no_renorm = true;
        config.b_th = 0.8;
        let (_, results) = run_point(&config, 5, 1.0, 0).unwrap();
        for r in &results {
            assert!(r.truth_index.is_none());
            let fired = matches!(r.decision.outcome, Outcome::Identified(_));
            assert_eq!(r.failure == 1, fired, "failure bit must mark every identification of an unmodeled truth");
        }
    }

    #[test]
    fn metrics_counts_partition_the_trials() {
        let mut config = custom_config(30);
        config.scenario.pi_star = 0.7;
        let (metrics, results) = run_point(&config, 5, 1.0, 0).unwrap();
        assert_eq!(metrics.trials, 30);
        assert_eq!(metrics.identified + metrics.nulls, metrics.trials);
        assert_eq!(
            metrics.failures_modeled + metrics.failures_unmodeled,
            metrics.failures
        );
        assert_eq!(
            (metrics.failure_rate * metrics.trials as f64).round() as usize,
            metrics.failures
        );
        assert_eq!(
            (metrics.null_rate * metrics.trials as f64).round() as usize,
            metrics.nulls
        );
        let recount = results.iter().filter(|r| r.failure == 1).count();
        assert_eq!(metrics.failures, recount);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let config = custom_config(12);
        let (ma, ra) = run_point(&config, 5, 1.0, 3).unwrap();
        let (mb, rb) = run_point(&config, 5, 1.0, 3).unwrap();
        assert_eq!(ma.failures, mb.failures);
        assert_eq!(ma.avg_delay, mb.avg_delay);
        for (a, b) in ra.iter().zip(&rb) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.decision.outcome, b.decision.outcome);
            assert_eq!(a.decision.step, b.decision.step);
        }
        // Distinct points use distinct seed streams.
        let (_, rc) = run_point(&config, 5, 1.0, 4).unwrap();
        assert_ne!(ra[0].seed, rc[0].seed);
    }

    #[test]
    fn identification_delays_respect_the_window_floor() {
        let mut config = custom_config(25);
        config.scenario.pi_star = 1.0;
        config.b_th = 0.9;
        for window in [3, 6] {
            let (_, results) = run_point(&config, window, 1.0, 0).unwrap();
            let mut seen = 0;
            for r in &results {
                if let Some(delay) = r.delay {
                    assert!(delay >= window - 1, "delay {delay} below floor");
                    seen += 1;
                }
            }
            assert!(seen > 0, "no identification fired at window {window}");
        }
    }

    #[test]
    fn seed_derivation_is_stable_and_collision_free() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(8, &[1, 2]));
        let mut seen = HashSet::new();
        for point in 0..40u64 {
            for trial in 0..100u64 {
                seen.insert(derive_seed(99, &[point, trial]));
            }
        }
        assert_eq!(seen.len(), 4000);
    }

    #[test]
    fn exploding_simulation_exhausts_the_redraw_budget() {
        let config = custom_config(1);
        let scenario = custom_scenario(&config);
        let nan_model = SystemModel::new(
            "unstable",
            1,
            1,
            1,
            Arc::new(|_: &DVector<f64>, _: &DVector<f64>| DVector::from_element(1, f64::NAN)),
            Arc::new(|x: &DVector<f64>| x.clone()),
            DMatrix::from_element(1, 1, 0.01),
            DMatrix::from_element(1, 1, 0.01),
        )
        .unwrap();
        let exploding = scenario
            .with_truth(Truth {
                model: nan_model,
                index: None,
            })
            .unwrap()
            .with_truth_sampler(None);
        let engine = config.engine_config(5, false);
        let err = run_trial(
            &exploding,
            &engine,
            Mode::Passive,
            &config.active_config(),
            0,
            7,
        )
        .unwrap_err();
        assert!(matches!(err, FidError::InvalidTrial { attempts: 3 }));
    }

    #[test]
    fn sweep_emits_the_contract_files() {
        let mut config = custom_config(5);
        config.name = format!("sweep_contract_{}", std::process::id());
        config.mode = Mode::Active;
        config.windows = vec![4, 6];
        config.noise_scales = vec![1.0, 2.0];
        config.keep_traces = 1;
        let root = std::env::temp_dir().join("fid_harness_tests");
        let report = run_sweep(&config, &root).unwrap();
        assert_eq!(report.points.len(), 4);

        let csv = fs::read_to_string(report.out_dir.join("sweep.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("mode,window,noise_scale"));
        assert!(lines[1].starts_with("active,4,1,"));

        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(report.out_dir.join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["points"].as_array().unwrap().len(), 4);
        assert_eq!(summary["config"]["trials"], 5);

        let traces: Vec<_> = fs::read_dir(report.out_dir.join("traces"))
            .unwrap()
            .collect();
        assert_eq!(traces.len(), 4);

        fs::remove_dir_all(&report.out_dir).unwrap();
    }

    #[test]
    fn zero_mismatch_study_has_exactly_zero_delta() {
        let mut config = custom_config(8);
        config.windows = vec![4];
        // Knobs at zero: baseline and "perturbed" runs share every draw.
        config.scenario.mismatch.fault_param_dev = 0.0;
        config.scenario.mismatch.disturbance_scale = 0.0;
        let report = run_mismatch_study(&config).unwrap();
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].delta, 0.0);
        assert_eq!(
            report[0].baseline.failures,
            report[0].perturbed.failures
        );
    }

    #[test]
    fn heavy_mismatch_degrades_identification() {
        let mut config = custom_config(25);
        config.windows = vec![5];
        config.scenario.pi_star = 1.0;
        config.scenario.mismatch.fault_param_dev = 2.0;
        config.scenario.mismatch.disturbance_scale = 2.0;
        let report = run_mismatch_study(&config).unwrap();
        assert!(
            report[0].delta > 0.0,
            "200% mismatch should raise the failure rate (delta = {})",
            report[0].delta
        );
    }

    #[test]
    fn noise_scale_point_rescales_measurement_covariance() {
        let config = custom_config(1);
        let base = config.point_scenario(1.0).unwrap();
        let doubled = config.point_scenario(2.0).unwrap();
        let r0 = base.hypotheses().models()[0].r()[(0, 0)];
        let r1 = doubled.hypotheses().models()[0].r()[(0, 0)];
        assert!((r1 / r0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_experiment_configs_are_rejected() {
        let ok = custom_config(5);
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.trials = 0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.windows = vec![];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.noise_scales = vec![0.0];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.authority_scale = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.scenario.pi_star = 2.0;
        assert!(bad.validate().is_err());

        // JSON round trip with overrides.
        let text = r#"{"name": "x", "mode": "active", "trials": 3, "scenario": {"scenario": "example1"}}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.mode, Mode::Active);
        assert_eq!(cfg.trials, 3);
        assert_eq!(cfg.scenario.scenario, "example1");
        assert!(ExperimentConfig::from_json(r#"{"mode": "sideways"}"#).is_err());
    }

    #[test]
    fn build_scenario_rejects_mode_string_mismatch() {
        assert_eq!("passive".parse::<Mode>().unwrap(), Mode::Passive);
        assert_eq!("active".parse::<Mode>().unwrap(), Mode::Active);
        assert!("hybrid".parse::<Mode>().is_err());
        assert_eq!(Mode::Active.to_string(), "active");
    }

    #[test]
    fn two_tank_point_runs_through_the_harness() {
        // Smoke the bundled nonlinear scenario end to end at a small size.
        let mut scenario = ScenarioConfig::default_for(ScenarioKind::TwoTank);
        scenario.horizon = 30;
        let config = ExperimentConfig {
            name: "tank_smoke".to_string(),
            scenario,
            windows: vec![5],
            trials: 4,
            ..ExperimentConfig::default()
        };
        let (metrics, results) = run_point(&config, 5, 1.0, 0).unwrap();
        assert_eq!(metrics.trials, 4);
        assert_eq!(results.len(), 4);
        let _ = build_scenario(ScenarioKind::TwoTank, &config.scenario).unwrap();
        // The nominal policy is a constant inflow.
        assert!(matches!(
            config.point_scenario(1.0).unwrap().policy(),
            ControlPolicy::Constant(_)
        ));
    }
}
