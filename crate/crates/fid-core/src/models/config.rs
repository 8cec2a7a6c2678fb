//! Scenario configuration schema.
//!
//! Scenarios are described by a JSON document (shipped defaults live under
//! `configs/`) with the shape
//!
//! ```json
//! {
//!   "scenario": "two_tank",
//!   "horizon": 150,
//!   "noise_scale": 1.0,
//!   "pi_star": 0.8,
//!   "dt": 1.0,
//!   "rk4_substeps": 2,
//!   "control_bounds": [[0.0, 0.6]],
//!   "fault_params": { "two_tank": { ... } },
//!   "mismatch": { "fault_param_dev": 0.0, "disturbance_scale": 0.0 }
//! }
//! ```
//!
//! `noise_scale` multiplies the baseline measurement covariance `R` of every
//! model (and `Q` too when `scale_process_noise` is set). `pi_star` is the
//! probability that a trial's true fault is one of the modeled hypotheses;
//! otherwise an unmodeled variant is drawn with a parameter halfway between
//! the nominal and modeled fault values. `mismatch` perturbs only the true
//! system, leaving the filter models untouched.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FidError, Result};

/// Identifiers of the bundled scenario families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioKind {
    TwoTank,
    MarsSatellite,
    Example1,
    /// Configurable bank of scalar linear-gain models; handy for smoke tests
    /// and calibration runs.
    Custom,
}

impl ScenarioKind {
    pub fn id(&self) -> &'static str {
        match self {
            Self::TwoTank => "two_tank",
            Self::MarsSatellite => "mars_satellite",
            Self::Example1 => "example1",
            Self::Custom => "custom",
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = FidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_tank" => Ok(Self::TwoTank),
            "mars_satellite" => Ok(Self::MarsSatellite),
            "example1" => Ok(Self::Example1),
            "custom" => Ok(Self::Custom),
            other => Err(FidError::UnknownScenario(other.to_string())),
        }
    }
}

/// Perturbations applied to the true system only (robustness studies).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MismatchConfig {
    /// Relative deviation bound on the true fault parameter; the realized
    /// deviation is uniform in `[-dev, +dev]`.
    pub fault_param_dev: f64,
    /// Constant disturbance torque/input on the true system, as a fraction of
    /// the admissible control magnitude; components uniform in `[-s, +s]`.
    pub disturbance_scale: f64,
}

impl Default for MismatchConfig {
    fn default() -> Self {
        Self {
            fault_param_dev: 0.0,
            disturbance_scale: 0.0,
        }
    }
}

/// Two-tank gravity-drain parameters. Faults multiply one orifice
/// coefficient each; the unmodeled variant uses a factor halfway between
/// nominal (1.0) and the modeled fault factor on a random orifice.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TwoTankParams {
    pub area: [f64; 2],
    /// Tank-1 ambient drain coefficient.
    pub c_drain1: f64,
    /// Tank-1 to tank-2 coupling orifice coefficient.
    pub c_coupling: f64,
    /// Tank-2 outlet coefficient.
    pub c_drain2: f64,
    /// Fault multipliers on [drain1, coupling, drain2].
    pub leak_factors: [f64; 3],
    /// Level sensor noise standard deviation (both levels are measured).
    pub meas_noise: f64,
    /// Per-step process noise standard deviation on both levels.
    pub process_noise: f64,
    /// Constant nominal inflow (the passive policy).
    pub inflow: f64,
    pub x0_mean: [f64; 2],
    pub x0_std: [f64; 2],
    /// Admissible inflow range is `[0, u_max]`.
    pub u_max: f64,
}

impl Default for TwoTankParams {
    fn default() -> Self {
        Self {
            area: [1.0, 1.0],
            c_drain1: 0.05,
            c_coupling: 0.30,
            c_drain2: 0.25,
            leak_factors: [3.0, 2.0, 2.0],
            meas_noise: 0.015,
            process_noise: 0.005,
            inflow: 0.315,
            x0_mean: [1.7, 1.0],
            x0_std: [0.1, 0.1],
            u_max: 0.6,
        }
    }
}

/// Rigid-body satellite with MRP attitude states. Faults scale the realized
/// torque on one axis; the unmodeled variant scales a random axis by a factor
/// halfway between nominal (1.0) and `torque_factor`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SatelliteParams {
    pub inertia: [f64; 3],
    /// Realized-torque multiplier of a faulted axis.
    pub torque_factor: f64,
    /// PD attitude-tracking gains: `u = -kp * sigma - kd * omega`.
    pub kp: f64,
    pub kd: f64,
    /// Per-axis torque bound; admissible box is `[-u_max, u_max]^3`.
    pub u_max: f64,
    pub sigma_noise: f64,
    pub omega_noise: f64,
    pub process_noise_sigma: f64,
    pub process_noise_omega: f64,
    pub x0_sigma: [f64; 3],
    pub x0_omega: [f64; 3],
    pub x0_sigma_std: f64,
    pub x0_omega_std: f64,
    /// Step at which a commanded slew begins: the tracking reference switches
    /// from the origin to `maneuver_sigma` for the rest of the run.
    pub maneuver_time: usize,
    /// Commanded MRP attitude offset of the scheduled slew.
    pub maneuver_sigma: [f64; 3],
}

impl Default for SatelliteParams {
    fn default() -> Self {
        Self {
            inertia: [4.0, 5.0, 3.0],
            torque_factor: 0.5,
            kp: 1.2,
            kd: 4.0,
            u_max: 0.05,
            sigma_noise: 0.015,
            omega_noise: 4e-3,
            process_noise_sigma: 1e-5,
            process_noise_omega: 1e-5,
            x0_sigma: [0.004, -0.003, 0.004],
            x0_omega: [0.0, 0.0, 0.0],
            x0_sigma_std: 0.006,
            x0_omega_std: 0.002,
            maneuver_time: 60,
            maneuver_sigma: [0.05, -0.04, 0.045],
        }
    }
}

/// Two-hypothesis linear pair where only the second control axis separates
/// the models: nominal gain 1.0 versus `gain2` on axis 2.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Example1Params {
    /// Axis-2 input gain of the mismatched hypothesis.
    pub gain2: f64,
    pub q_std: f64,
    pub r_std: f64,
    /// Admissible box is `[-u_max, u_max]^2`.
    pub u_max: f64,
    pub x0_std: f64,
    /// Constant passive control; only the first axis is excited, which makes
    /// the pair indistinguishable without active inputs.
    pub passive_u1: f64,
}

impl Default for Example1Params {
    fn default() -> Self {
        Self {
            gain2: 0.5,
            q_std: 0.05,
            r_std: 0.1,
            u_max: 1.0,
            x0_std: 0.1,
            passive_u1: 1.0,
        }
    }
}

/// Scalar linear-gain family: `x' = x + g_i u + w`, `y = x + v`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LinearGainParams {
    pub gains: Vec<f64>,
    pub q_std: f64,
    pub r_std: f64,
    pub u_max: f64,
    pub x0_std: f64,
    /// Constant passive control.
    pub passive_u: f64,
    /// Unmodeled gain; defaults to halfway between the first two gains.
    pub unmodeled_gain: Option<f64>,
}

impl Default for LinearGainParams {
    fn default() -> Self {
        Self {
            gains: vec![1.0, 5.0],
            q_std: 0.05,
            r_std: 0.1,
            u_max: 1.0,
            x0_std: 0.1,
            passive_u: 0.5,
            unmodeled_gain: None,
        }
    }
}

/// Per-family fault parameters; only the section matching `scenario` is read.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FaultParams {
    pub two_tank: TwoTankParams,
    pub mars_satellite: SatelliteParams,
    pub example1: Example1Params,
    pub custom: LinearGainParams,
}

/// Full scenario configuration; see the module docs for the JSON schema.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    /// Number of simulated steps `K`; decisions may fire at `k <= K`.
    pub horizon: usize,
    /// Multiplier on the baseline measurement covariance `R`.
    pub noise_scale: f64,
    /// Also scale the process covariance `Q` by `noise_scale`.
    pub scale_process_noise: bool,
    /// Probability that the true fault is one of the modeled hypotheses.
    pub pi_star: f64,
    /// Continuous-time scenarios integrate with RK4 over `dt`.
    pub dt: f64,
    pub rk4_substeps: u32,
    /// Overrides the scenario's default admissible control box.
    pub control_bounds: Option<Vec<[f64; 2]>>,
    pub fault_params: FaultParams,
    pub mismatch: MismatchConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: "two_tank".to_string(),
            horizon: 150,
            noise_scale: 1.0,
            scale_process_noise: false,
            pi_star: 0.8,
            dt: 1.0,
            rk4_substeps: 2,
            control_bounds: None,
            fault_params: FaultParams::default(),
            mismatch: MismatchConfig::default(),
        }
    }
}

impl ScenarioConfig {
    /// Default configuration for a given scenario family.
    pub fn default_for(kind: ScenarioKind) -> Self {
        let mut cfg = Self::default();
        cfg.scenario = kind.id().to_string();
        match kind {
            ScenarioKind::TwoTank => cfg.horizon = 150,
            ScenarioKind::MarsSatellite => cfg.horizon = 70,
            ScenarioKind::Example1 => cfg.horizon = 200,
            ScenarioKind::Custom => cfg.horizon = 100,
        }
        cfg
    }

    pub fn kind(&self) -> Result<ScenarioKind> {
        self.scenario.parse()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.kind()?;
        if self.horizon == 0 {
            return Err(FidError::Config("horizon must be at least 1".into()));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return Err(FidError::OutOfRange {
                context: "ScenarioConfig",
                name: "noise_scale",
                value: self.noise_scale,
                bounds: "(0, inf)",
            });
        }
        if !(0.0..=1.0).contains(&self.pi_star) || !self.pi_star.is_finite() {
            return Err(FidError::OutOfRange {
                context: "ScenarioConfig",
                name: "pi_star",
                value: self.pi_star,
                bounds: "[0, 1]",
            });
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(FidError::OutOfRange {
                context: "ScenarioConfig",
                name: "dt",
                value: self.dt,
                bounds: "(0, inf)",
            });
        }
        if self.rk4_substeps == 0 {
            return Err(FidError::Config("rk4_substeps must be at least 1".into()));
        }
        if !(self.mismatch.fault_param_dev.is_finite() && self.mismatch.fault_param_dev >= 0.0) {
            return Err(FidError::OutOfRange {
                context: "ScenarioConfig",
                name: "mismatch.fault_param_dev",
                value: self.mismatch.fault_param_dev,
                bounds: "[0, inf)",
            });
        }
        if !(self.mismatch.disturbance_scale.is_finite()
            && self.mismatch.disturbance_scale >= 0.0)
        {
            return Err(FidError::OutOfRange {
                context: "ScenarioConfig",
                name: "mismatch.disturbance_scale",
                value: self.mismatch.disturbance_scale,
                bounds: "[0, inf)",
            });
        }
        Ok(())
    }
}
