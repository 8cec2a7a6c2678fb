//! Bayesian fault identification for discrete-time nonlinear stochastic systems.

pub mod active;
pub mod diagnosability;
pub mod engine;
pub mod error;
pub mod filter;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod stats;

pub use active::{
    active_fid_run, is_degenerate, objective_j, pairwise_distance, select_control, ActiveConfig,
    ControlGrid, PredictedMeasurementSet, SelectionOutcome, SeparationExponent,
};
pub use diagnosability::{
    estimate_lambda, estimate_lambda_bar, is_fundamentally_limited, DiagnosabilityConfig,
    DiagnosabilityReport,
};
pub use engine::{
    belief_update, failure_indicator, hypothesis_test, passive_fid_run, Belief, ControlChoice,
    Decision, EngineConfig, FilterTrace, Outcome, TraceStep, TrialRun, Window,
};
pub use error::{FidError, Result};
pub use harness::{
    derive_seed, run_mismatch_study, run_monte_carlo, run_point, run_sweep, run_trial,
    ExperimentConfig, Metrics, MismatchPoint, Mode, PointReport, SweepPoint, SweepReport,
    TrialResult,
};
pub use filter::{FilterBank, FilterConfig, FilterState, PredictedState, StepRecord};
pub use models::{
    build_scenario, build_scenario_from_config, ControlBox, ControlPolicy, HypothesisSet,
    Scenario, ScenarioConfig, ScenarioKind, SystemModel, Truth,
};

/// Counter-based seedable generator used everywhere randomness is consumed.
/// ChaCha keeps trial streams reproducible across platforms and thread counts.
pub type FidRng = rand_chacha::ChaCha8Rng;
