//! System models, hypothesis sets, and scenario construction.
//!
//! A [`SystemModel`] is a discrete-time stochastic system
//!
//! ```text
//! x_{k+1} = F(x_k, u_k) + w_k,   w_k ~ N(0, Q)
//! y_k     = G(x_k)      + v_k,   v_k ~ N(0, R)
//! ```
//!
//! with immutable dynamics/measurement closures so a model can be shared
//! across filter banks and worker threads. Jacobians default to central
//! finite differences with per-component steps `1e-6 * max(1, |x_i|)`;
//! models may carry analytic overrides (the bundled scenarios do, and the
//! finite-difference path is tested against them).
//!
//! A [`Scenario`] bundles a hypothesis set, the true system, the initial
//! state prior, the nominal control policy, the admissible control box used
//! by active identification, and a per-trial truth sampler.

mod config;
mod example1;
mod linear;
mod satellite;
mod two_tank;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;

use crate::error::{FidError, Result};
use crate::linalg;
use crate::FidRng;

pub use config::{
    Example1Params, FaultParams, LinearGainParams, MismatchConfig, SatelliteParams,
    ScenarioConfig, ScenarioKind, TwoTankParams,
};
pub use linear::linear_model;

pub type DynamicsFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type DynamicsJacobianFn =
    Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type MeasurementFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MeasurementJacobianFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Relative step scale for central-difference Jacobians.
pub const FD_STEP: f64 = 1e-6;

/// One fault hypothesis: dynamics, measurement map, and noise covariances.
#[derive(Clone)]
pub struct SystemModel {
    label: String,
    n_x: usize,
    n_u: usize,
    n_y: usize,
    dynamics: DynamicsFn,
    measurement: MeasurementFn,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    q_chol: DMatrix<f64>,
    r_chol: DMatrix<f64>,
    dynamics_jacobian: Option<DynamicsJacobianFn>,
    measurement_jacobian: Option<MeasurementJacobianFn>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("label", &self.label)
            .field("n_x", &self.n_x)
            .field("n_u", &self.n_u)
            .field("n_y", &self.n_y)
            .finish_non_exhaustive()
    }
}

/// Jacobians of the dynamics and measurement maps around an operating point,
/// along with the deterministic one-step prediction they were evaluated at.
#[derive(Clone, Debug)]
pub struct Linearization {
    /// `dF/dx` at `(x, u)`.
    pub phi: DMatrix<f64>,
    /// `dG/dx` at the predicted state `F(x, u)`.
    pub h: DMatrix<f64>,
    /// `F(x, u)` without process noise.
    pub x_pred: DVector<f64>,
}

impl SystemModel {
    /// Builds a model, validating dimensions and that `Q` and `R` are
    /// symmetric positive definite.
    pub fn new(
        label: impl Into<String>,
        n_x: usize,
        n_u: usize,
        n_y: usize,
        dynamics: DynamicsFn,
        measurement: MeasurementFn,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(FidError::Config(
                "state and measurement dimensions must be positive".into(),
            ));
        }
        check_dims("Q", &q, n_x)?;
        check_dims("R", &r, n_y)?;
        let q_chol = linalg::cholesky_factor(&q, "Q")?;
        let r_chol = linalg::cholesky_factor(&r, "R")?;
        Ok(Self {
            label: label.into(),
            n_x,
            n_u,
            n_y,
            dynamics,
            measurement,
            q,
            r,
            q_chol,
            r_chol,
            dynamics_jacobian: None,
            measurement_jacobian: None,
        })
    }

    /// Attaches an analytic `dF/dx`; finite differences are used otherwise.
    pub fn with_dynamics_jacobian(mut self, jac: DynamicsJacobianFn) -> Self {
        self.dynamics_jacobian = Some(jac);
        self
    }

    /// Attaches an analytic `dG/dx`; finite differences are used otherwise.
    pub fn with_measurement_jacobian(mut self, jac: MeasurementJacobianFn) -> Self {
        self.measurement_jacobian = Some(jac);
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Returns a copy with both noise covariances rescaled.
    /// `r_scale`/`q_scale` multiply the covariances and must be positive.
    pub fn with_scaled_noise(&self, q_scale: f64, r_scale: f64) -> Result<Self> {
        if q_scale <= 0.0 || r_scale <= 0.0 {
            return Err(FidError::Config(
                "noise scales must be positive to keep covariances definite".into(),
            ));
        }
        let mut out = self.clone();
        out.q = &self.q * q_scale;
        out.r = &self.r * r_scale;
        out.q_chol = &self.q_chol * q_scale.sqrt();
        out.r_chol = &self.r_chol * r_scale.sqrt();
        Ok(out)
    }

    fn check_state(&self, x: &DVector<f64>, context: &'static str) -> Result<()> {
        if x.len() != self.n_x {
            return Err(FidError::DimensionMismatch {
                context,
                expected: self.n_x,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_control(&self, u: &DVector<f64>, context: &'static str) -> Result<()> {
        if u.len() != self.n_u {
            return Err(FidError::DimensionMismatch {
                context,
                expected: self.n_u,
                actual: u.len(),
            });
        }
        Ok(())
    }

    /// One step of the stochastic dynamics: `F(x, u) + w`, `w ~ N(0, Q)`.
    pub fn step_dynamics<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let mean = self.step_deterministic(x, u)?;
        Ok(linalg::sample_gaussian(&mean, &self.q_chol, rng))
    }

    /// Noise-free dynamics step `F(x, u)`; the zero-covariance override used
    /// by tests and oracles.
    pub fn step_deterministic(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x, "step_dynamics: state")?;
        self.check_control(u, "step_dynamics: control")?;
        Ok((self.dynamics)(x, u))
    }

    /// Noisy measurement `G(x) + v`, `v ~ N(0, R)`.
    pub fn measure<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        let mean = self.measure_deterministic(x)?;
        Ok(linalg::sample_gaussian(&mean, &self.r_chol, rng))
    }

    /// Noise-free measurement `G(x)`.
    pub fn measure_deterministic(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x, "measure: state")?;
        Ok((self.measurement)(x))
    }

    /// `dF/dx` at `(x, u)`, analytic when the model carries an override.
    pub fn dynamics_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(x, "dynamics_jacobian: state")?;
        self.check_control(u, "dynamics_jacobian: control")?;
        let jac = match &self.dynamics_jacobian {
            Some(j) => j(x, u),
            None => self.fd_dynamics_jacobian(x, u),
        };
        if !linalg::all_finite_mat(&jac) {
            return Err(FidError::NonFinite("dynamics Jacobian"));
        }
        Ok(jac)
    }

    /// `dG/dx` at `x`, analytic when the model carries an override.
    pub fn measurement_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(x, "measurement_jacobian: state")?;
        let jac = match &self.measurement_jacobian {
            Some(j) => j(x),
            None => self.fd_measurement_jacobian(x),
        };
        if !linalg::all_finite_mat(&jac) {
            return Err(FidError::NonFinite("measurement Jacobian"));
        }
        Ok(jac)
    }

    /// Linearizes the model around `(x, u)`: `phi = dF/dx` there, and `h =
    /// dG/dx` at the predicted state `F(x, u)`.
    pub fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Linearization> {
        let phi = self.dynamics_jacobian(x, u)?;
        let x_pred = self.step_deterministic(x, u)?;
        if !linalg::all_finite_vec(&x_pred) {
            return Err(FidError::NonFinite("predicted state"));
        }
        let h = self.measurement_jacobian(&x_pred)?;
        Ok(Linearization { phi, h, x_pred })
    }

    /// Same as [`linearize`](Self::linearize) but always uses central finite
    /// differences, ignoring analytic overrides. Used to cross-check them.
    pub fn linearize_fd(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Linearization> {
        self.check_state(x, "linearize_fd: state")?;
        self.check_control(u, "linearize_fd: control")?;
        let phi = self.fd_dynamics_jacobian(x, u);
        let x_pred = self.step_deterministic(x, u)?;
        let h = self.fd_measurement_jacobian(&x_pred);
        if !linalg::all_finite_mat(&phi) || !linalg::all_finite_mat(&h) {
            return Err(FidError::NonFinite("finite-difference Jacobian"));
        }
        Ok(Linearization { phi, h, x_pred })
    }

    fn fd_dynamics_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.n_x, self.n_x);
        let mut hi = x.clone();
        let mut lo = x.clone();
        for i in 0..self.n_x {
            let step = FD_STEP * x[i].abs().max(1.0);
            hi[i] = x[i] + step;
            lo[i] = x[i] - step;
            let col = ((self.dynamics)(&hi, u) - (self.dynamics)(&lo, u)) / (2.0 * step);
            jac.set_column(i, &col);
            hi[i] = x[i];
            lo[i] = x[i];
        }
        jac
    }

    fn fd_measurement_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.n_y, self.n_x);
        let mut hi = x.clone();
        let mut lo = x.clone();
        for i in 0..self.n_x {
            let step = FD_STEP * x[i].abs().max(1.0);
            hi[i] = x[i] + step;
            lo[i] = x[i] - step;
            let col = ((self.measurement)(&hi) - (self.measurement)(&lo)) / (2.0 * step);
            jac.set_column(i, &col);
            hi[i] = x[i];
            lo[i] = x[i];
        }
        jac
    }
}

fn check_dims(context: &'static str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(FidError::DimensionMismatch {
            context: match context {
                "Q" => "SystemModel: Q",
                _ => "SystemModel: R",
            },
            expected: n,
            actual: m.nrows().max(m.ncols()),
        });
    }
    Ok(())
}

/// The unconditional MRP shadow map `sigma -> -sigma / (sigma . sigma)`.
/// An involution away from the origin.
pub fn mrp_shadow_map(sigma: &Vector3<f64>) -> Vector3<f64> {
    -sigma / sigma.norm_squared()
}

/// Switches a modified Rodrigues parameter vector to its shadow set when
/// strictly outside the unit ball; `|sigma| <= 1` is returned unchanged.
pub fn mrp_shadow(sigma: &Vector3<f64>) -> Vector3<f64> {
    if sigma.norm_squared() > 1.0 {
        mrp_shadow_map(sigma)
    } else {
        *sigma
    }
}

/// An ordered, labeled set of fault hypotheses sharing control and
/// measurement dimensions (state dimensions may differ).
#[derive(Clone, Debug)]
pub struct HypothesisSet {
    models: Vec<SystemModel>,
}

impl HypothesisSet {
    /// Validates shared dimensions, distinct labels, and that no two models
    /// are numerically identical (probed on pseudo-random states/controls).
    pub fn new(models: Vec<SystemModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(FidError::Empty("hypothesis set"));
        }
        let n_u = models[0].n_u();
        let n_y = models[0].n_y();
        for m in &models {
            if m.n_u() != n_u {
                return Err(FidError::DimensionMismatch {
                    context: "HypothesisSet: control dimension",
                    expected: n_u,
                    actual: m.n_u(),
                });
            }
            if m.n_y() != n_y {
                return Err(FidError::DimensionMismatch {
                    context: "HypothesisSet: measurement dimension",
                    expected: n_y,
                    actual: m.n_y(),
                });
            }
        }
        for i in 0..models.len() {
            for j in (i + 1)..models.len() {
                if models[i].label() == models[j].label() {
                    return Err(FidError::Config(format!(
                        "duplicate hypothesis label `{}`",
                        models[i].label()
                    )));
                }
                if models_indistinguishable(&models[i], &models[j]) {
                    return Err(FidError::Config(format!(
                        "hypotheses `{}` and `{}` are numerically identical",
                        models[i].label(),
                        models[j].label()
                    )));
                }
            }
        }
        Ok(Self { models })
    }

    /// Builds a set without the distinctness probe, for deliberately
    /// degenerate sets (for example, identical copies used to pin down the
    /// zero of a diagnosability estimate). Labels must still be distinct and
    /// dimensions shared.
    pub fn new_unchecked(models: Vec<SystemModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(FidError::Empty("hypothesis set"));
        }
        for m in &models {
            if m.n_u() != models[0].n_u() || m.n_y() != models[0].n_y() {
                return Err(FidError::DimensionMismatch {
                    context: "HypothesisSet: shared dimensions",
                    expected: models[0].n_u(),
                    actual: m.n_u(),
                });
            }
        }
        for i in 0..models.len() {
            for j in (i + 1)..models.len() {
                if models[i].label() == models[j].label() {
                    return Err(FidError::Config(format!(
                        "duplicate hypothesis label `{}`",
                        models[i].label()
                    )));
                }
            }
        }
        Ok(Self { models })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[SystemModel] {
        &self.models
    }

    pub fn labels(&self) -> Vec<String> {
        self.models.iter().map(|m| m.label().to_string()).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.models.iter().position(|m| m.label() == label)
    }

    pub fn n_u(&self) -> usize {
        self.models[0].n_u()
    }

    pub fn n_y(&self) -> usize {
        self.models[0].n_y()
    }
}

impl std::ops::Index<usize> for HypothesisSet {
    type Output = SystemModel;

    fn index(&self, i: usize) -> &SystemModel {
        &self.models[i]
    }
}

/// Probes two models on a fixed pseudo-random set of states and controls.
/// Models of different state dimension are trivially distinguishable.
fn models_indistinguishable(a: &SystemModel, b: &SystemModel) -> bool {
    use rand::SeedableRng;
    if a.n_x() != b.n_x() {
        return false;
    }
    let tol = 1e-12;
    let close = |p: &DVector<f64>, q: &DVector<f64>| {
        (p - q).amax() <= tol * (1.0 + p.amax().max(q.amax()))
    };
    if (a.q() - b.q()).amax() > tol || (a.r() - b.r()).amax() > tol {
        return false;
    }
    let mut rng = FidRng::seed_from_u64(0xF1D0_5EED);
    for _ in 0..8 {
        let x = DVector::from_fn(a.n_x(), |_, _| rng.random_range(-1.0..1.0));
        let u = DVector::from_fn(a.n_u(), |_, _| rng.random_range(-1.0..1.0));
        let (fa, fb) = match (a.step_deterministic(&x, &u), b.step_deterministic(&x, &u)) {
            (Ok(fa), Ok(fb)) => (fa, fb),
            _ => return false,
        };
        if !close(&fa, &fb) {
            return false;
        }
        let (ga, gb) = match (a.measure_deterministic(&x), b.measure_deterministic(&x)) {
            (Ok(ga), Ok(gb)) => (ga, gb),
            _ => return false,
        };
        if !close(&ga, &gb) {
            return false;
        }
    }
    true
}

/// Axis-aligned admissible control box.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlBox {
    bounds: Vec<[f64; 2]>,
}

impl ControlBox {
    pub fn new(bounds: Vec<[f64; 2]>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(FidError::Empty("control box"));
        }
        for (i, b) in bounds.iter().enumerate() {
            if !b[0].is_finite() || !b[1].is_finite() || b[0] > b[1] {
                return Err(FidError::Config(format!(
                    "control bound {i} must satisfy finite lo <= hi, got [{}, {}]",
                    b[0], b[1]
                )));
            }
        }
        Ok(Self { bounds })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn lower(&self, axis: usize) -> f64 {
        self.bounds[axis][0]
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.bounds[axis][1]
    }

    pub fn bounds(&self) -> &[[f64; 2]] {
        &self.bounds
    }

    /// Scales every bound about the origin (control-authority scaling).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(FidError::OutOfRange {
                context: "ControlBox::scaled",
                name: "factor",
                value: factor,
                bounds: "(0, inf)",
            });
        }
        Self::new(self.bounds.iter().map(|b| [b[0] * factor, b[1] * factor]).collect())
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.len() == self.dim()
            && u.iter()
                .zip(&self.bounds)
                .all(|(v, b)| *v >= b[0] - 1e-12 && *v <= b[1] + 1e-12)
    }

    pub fn clamp(&self, u: &mut DVector<f64>) {
        for (i, b) in self.bounds.iter().enumerate() {
            u[i] = u[i].clamp(b[0], b[1]);
        }
    }
}

/// Nominal control law used while identification runs passively.
#[derive(Clone)]
pub enum ControlPolicy {
    /// Same control every step.
    Constant(DVector<f64>),
    /// Fixed sequence; the last element repeats past the end.
    OpenLoop(Vec<DVector<f64>>),
    /// State feedback `u_k = f(x_ref, k)`. The identification loop feeds it
    /// the state estimate of the currently most-believed hypothesis, since
    /// the true state is hidden from the controller.
    Feedback(Arc<dyn Fn(&DVector<f64>, usize) -> DVector<f64> + Send + Sync>),
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(u) => f.debug_tuple("Constant").field(u).finish(),
            Self::OpenLoop(seq) => f.debug_tuple("OpenLoop").field(&seq.len()).finish(),
            Self::Feedback(_) => f.write_str("Feedback(..)"),
        }
    }
}

impl ControlPolicy {
    pub fn control(&self, x: &DVector<f64>, k: usize) -> DVector<f64> {
        match self {
            Self::Constant(u) => u.clone(),
            Self::OpenLoop(seq) => seq[k.min(seq.len() - 1)].clone(),
            Self::Feedback(f) => f(x, k),
        }
    }
}

/// The true system a trial simulates; `index` is its position in the
/// hypothesis set when the fault is modeled, `None` for unmodeled faults.
#[derive(Clone, Debug)]
pub struct Truth {
    pub model: SystemModel,
    pub index: Option<usize>,
}

/// Per-trial truth sampler; draws consume the trial generator so results are
/// reproducible from the trial seed alone.
pub type TruthSampler = Arc<dyn Fn(&mut FidRng) -> Result<Truth> + Send + Sync>;

/// A complete identification problem instance.
#[derive(Clone)]
pub struct Scenario {
    name: String,
    hypotheses: HypothesisSet,
    truth: Truth,
    x0_mean: DVector<f64>,
    x0_cov: DMatrix<f64>,
    x0_chol: DMatrix<f64>,
    policy: ControlPolicy,
    admissible: ControlBox,
    horizon: usize,
    truth_sampler: Option<TruthSampler>,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("hypotheses", &self.hypotheses.labels())
            .field("truth", &self.truth.model.label())
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl Scenario {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        hypotheses: HypothesisSet,
        truth: Truth,
        x0_mean: DVector<f64>,
        x0_cov: DMatrix<f64>,
        policy: ControlPolicy,
        admissible: ControlBox,
        horizon: usize,
        truth_sampler: Option<TruthSampler>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(FidError::Config("horizon must be at least 1".into()));
        }
        if truth.model.n_u() != hypotheses.n_u() || truth.model.n_y() != hypotheses.n_y() {
            return Err(FidError::Config(
                "true model must share control and measurement dimensions with the hypothesis set"
                    .into(),
            ));
        }
        if let Some(i) = truth.index {
            if i >= hypotheses.len() {
                return Err(FidError::Config(format!(
                    "truth index {i} outside hypothesis set of size {}",
                    hypotheses.len()
                )));
            }
        }
        // A single prior serves every filter, so scenario models must agree
        // on the state dimension (the general bank API does not require it).
        for m in hypotheses.models() {
            if m.n_x() != x0_mean.len() {
                return Err(FidError::DimensionMismatch {
                    context: "Scenario: hypothesis state dimension vs prior",
                    expected: x0_mean.len(),
                    actual: m.n_x(),
                });
            }
        }
        if truth.model.n_x() != x0_mean.len() {
            return Err(FidError::DimensionMismatch {
                context: "Scenario: truth state dimension vs prior",
                expected: x0_mean.len(),
                actual: truth.model.n_x(),
            });
        }
        if admissible.dim() != hypotheses.n_u() {
            return Err(FidError::DimensionMismatch {
                context: "Scenario: control box dimension",
                expected: hypotheses.n_u(),
                actual: admissible.dim(),
            });
        }
        let x0_chol = linalg::cholesky_factor(&x0_cov, "initial state covariance")?;
        if x0_cov.nrows() != x0_mean.len() {
            return Err(FidError::DimensionMismatch {
                context: "Scenario: prior covariance",
                expected: x0_mean.len(),
                actual: x0_cov.nrows(),
            });
        }
        Ok(Self {
            name: name.into(),
            hypotheses,
            truth,
            x0_mean,
            x0_cov,
            x0_chol,
            policy,
            admissible,
            horizon,
            truth_sampler,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn hypotheses(&self) -> &HypothesisSet {
        &self.hypotheses
    }

    pub fn truth(&self) -> &Truth {
        &self.truth
    }

    pub fn x0_mean(&self) -> &DVector<f64> {
        &self.x0_mean
    }

    pub fn x0_cov(&self) -> &DMatrix<f64> {
        &self.x0_cov
    }

    pub fn policy(&self) -> &ControlPolicy {
        &self.policy
    }

    pub fn admissible(&self) -> &ControlBox {
        &self.admissible
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Copy of the scenario with a different true system.
    pub fn with_truth(&self, truth: Truth) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.hypotheses.clone(),
            truth,
            self.x0_mean.clone(),
            self.x0_cov.clone(),
            self.policy.clone(),
            self.admissible.clone(),
            self.horizon,
            self.truth_sampler.clone(),
        )
    }

    /// Copy with a different per-trial truth sampler; `None` pins every
    /// trial to the scenario's fixed truth.
    pub fn with_truth_sampler(&self, sampler: Option<TruthSampler>) -> Self {
        let mut out = self.clone();
        out.truth_sampler = sampler;
        out
    }

    /// Copy with a different nominal policy (open-loop replays in tests).
    pub fn with_policy(&self, policy: ControlPolicy) -> Self {
        let mut out = self.clone();
        out.policy = policy;
        out
    }

    /// Copy with a different admissible control box (e.g. scaled authority).
    pub fn with_admissible(&self, admissible: ControlBox) -> Result<Self> {
        if admissible.dim() != self.hypotheses.n_u() {
            return Err(FidError::DimensionMismatch {
                context: "Scenario: control box dimension",
                expected: self.hypotheses.n_u(),
                actual: admissible.dim(),
            });
        }
        let mut out = self.clone();
        out.admissible = admissible;
        Ok(out)
    }

    /// Copy with a different horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(FidError::Config("horizon must be at least 1".into()));
        }
        let mut out = self.clone();
        out.horizon = horizon;
        Ok(out)
    }

    /// Draws the true system for one trial. Scenarios built from configs draw
    /// a modeled fault with probability `pi_star` and an unmodeled variant
    /// otherwise; scenarios without a sampler keep their fixed truth.
    pub fn draw_truth(&self, rng: &mut FidRng) -> Result<Truth> {
        match &self.truth_sampler {
            Some(sampler) => sampler(rng),
            None => Ok(self.truth.clone()),
        }
    }

    /// Draws the initial true state from the prior `N(x0_mean, x0_cov)`.
    pub fn draw_x0<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        linalg::sample_gaussian(&self.x0_mean, &self.x0_chol, rng)
    }
}

/// Builds one of the bundled scenarios from its configuration.
pub fn build_scenario(kind: ScenarioKind, config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    match kind {
        ScenarioKind::TwoTank => two_tank::build(config),
        ScenarioKind::MarsSatellite => satellite::build(config),
        ScenarioKind::Example1 => example1::build(config),
        ScenarioKind::Custom => linear::build(config),
    }
}

/// Convenience: parse the scenario id from the config and build it.
pub fn build_scenario_from_config(config: &ScenarioConfig) -> Result<Scenario> {
    build_scenario(config.kind()?, config)
}

/// Fourth-order Runge-Kutta step of `dx/dt = f(x)` over `dt`.
pub(crate) fn rk4_step<F>(f: &F, x: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (dt / 2.0)));
    let k3 = f(&(x + &k2 * (dt / 2.0)));
    let k4 = f(&(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// RK4 step together with the exact Jacobian of the discrete map, obtained by
/// propagating the variational equation through the stages with `a = df/dx`.
pub(crate) fn rk4_step_with_jacobian<F, A>(
    f: &F,
    a: &A,
    x: &DVector<f64>,
    dt: f64,
) -> (DVector<f64>, DMatrix<f64>)
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    A: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let n = x.len();
    let eye = DMatrix::<f64>::identity(n, n);

    let k1 = f(x);
    let a1 = a(x);
    let x2 = x + &k1 * (dt / 2.0);
    let k2 = f(&x2);
    let a2 = a(&x2);
    let x3 = x + &k2 * (dt / 2.0);
    let k3 = f(&x3);
    let a3 = a(&x3);
    let x4 = x + &k3 * dt;
    let k4 = f(&x4);
    let a4 = a(&x4);

    let m1 = a1.clone();
    let m2 = &a2 * (&eye + &m1 * (dt / 2.0));
    let m3 = &a3 * (&eye + &m2 * (dt / 2.0));
    let m4 = &a4 * (&eye + &m3 * dt);

    let x_next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let phi = eye + (m1 + m2 * 2.0 + m3 * 2.0 + m4) * (dt / 6.0);
    (x_next, phi)
}
