//! Active input design.
//!
//! When identification stalls because two hypotheses predict the same
//! measurements under the nominal inputs, the control itself can be chosen
//! to pull their predictions apart. The objective scored here is the
//! geometric mean of the pairwise separations between the one-step-ahead
//! predicted measurement distributions of all live hypotheses:
//!
//! ```text
//! J(u) = ( prod_{m != m'} d(f_m(u), f_m'(u)) )^(1/|M|^2),
//! d(f_m, f_m') = (y_m - y_m')' S_m'^-1 (y_m - y_m')
//! ```
//!
//! with the product over ordered pairs and the distance normalized by the
//! *second* member's innovation covariance, so `d` is intentionally
//! asymmetric. The exponent is applied to the live-hypothesis count as
//! written above even though ordered pairs number `|M|(|M|-1)`; any positive
//! exponent is a monotone transform of the product, so the maximizer is
//! unaffected (see [`SeparationExponent`]).
//!
//! Maximization over the compact admissible box uses a deterministic grid
//! plus local halving refinements around the incumbent: the objective is
//! cheap (one readonly filter predict per hypothesis per candidate), can be
//! multimodal, and the control dimension is small, so exhaustive sampling
//! beats local search here. Ties are broken toward the smallest control
//! norm and then the lowest grid index, making the selection a pure
//! function of the filter-bank state.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::engine::{run_identification, Belief, ControlChoice, EngineConfig, TrialRun};
use crate::error::{FidError, Result};
use crate::filter::{innovation_stat, FilterBank};
use crate::models::{ControlBox, HypothesisSet, Scenario};
use crate::FidRng;

/// Relative spread below which the sampled objective counts as constant.
const DEGENERACY_REL_TOL: f64 = 1e-9;

/// Exponent applied to the product of ordered pairwise separations. All
/// variants are positive, so they share the same argmax; the choice only
/// changes the reported objective scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SeparationExponent {
    /// `1/|M|^2` with `|M|` the live-hypothesis count: the objective as
    /// defined, kept for fidelity even though it slightly underweights the
    /// product relative to a true geometric mean.
    SetSizeSquared,
    /// `1/(|M|(|M|-1))`: the exact geometric mean over ordered pairs.
    OrderedPairs,
    /// A fixed positive constant (e.g. `1.0` for the raw product).
    Fixed(f64),
}

impl SeparationExponent {
    fn value(self, live: usize) -> f64 {
        match self {
            Self::SetSizeSquared => ((live * live) as f64).recip(),
            Self::OrderedPairs => ((live * (live - 1)) as f64).recip(),
            Self::Fixed(c) => c,
        }
    }
}

/// Active input-design parameters.
#[derive(Clone, Copy, Debug)]
pub struct ActiveConfig {
    /// Grid resolution per control axis.
    pub grid_per_axis: usize,
    /// Halving refinement passes around the best grid point.
    pub refine_iters: usize,
    pub exponent: SeparationExponent,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            grid_per_axis: 9,
            refine_iters: 1,
            exponent: SeparationExponent::SetSizeSquared,
        }
    }
}

impl ActiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_per_axis == 0 {
            return Err(FidError::Config(
                "control grid needs at least one point per axis".into(),
            ));
        }
        if let SeparationExponent::Fixed(c) = self.exponent {
            if !(c.is_finite() && c > 0.0) {
                return Err(FidError::OutOfRange {
                    context: "active config",
                    name: "exponent",
                    value: c,
                    bounds: "(0, inf)",
                });
            }
        }
        Ok(())
    }
}

/// Predicted measurement mean and innovation covariance of every live
/// hypothesis under one candidate control. Membership implies the predict
/// step succeeded, so every stored covariance is SPD.
pub struct PredictedMeasurementSet {
    /// `(hypothesis index, predicted measurement, innovation covariance)`.
    members: Vec<(usize, DVector<f64>, DMatrix<f64>)>,
}

impl PredictedMeasurementSet {
    /// One-step lookahead of every live hypothesis under `u`. Hypotheses
    /// whose prediction fails numerically are dropped from the set — they
    /// have no valid predicted distribution to separate.
    pub fn lookahead(
        bank: &FilterBank,
        hyp: &HypothesisSet,
        live: &[bool],
        u: &DVector<f64>,
    ) -> Self {
        let mut members = Vec::new();
        for (m, model) in hyp.models().iter().enumerate() {
            if !live[m] {
                continue;
            }
            if let Ok(ps) = bank.filter(m).predict_readonly(model, u) {
                members.push((m, ps.y_pred, ps.s));
            }
        }
        Self { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Hypothesis indices present in the set.
    pub fn hypothesis_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().map(|(m, _, _)| *m)
    }
}

/// Separation of `m` from `m'`: the gap between their predicted measurement
/// means under `m'`'s innovation covariance,
/// `(y_m - y_m')' S_m'^-1 (y_m - y_m')`. Asymmetric by construction — the
/// covariance belongs to the second argument.
pub fn pairwise_distance(
    y_m: &DVector<f64>,
    y_mp: &DVector<f64>,
    s_mp: &DMatrix<f64>,
) -> Result<f64> {
    innovation_stat(&(y_m - y_mp), s_mp)
}

/// The separation objective over ordered pairs of live hypotheses, in log
/// space: `exp(c * sum log d)` for exponent `c`. Returns `None` when fewer
/// than two hypotheses are live (no pair to separate); any zero pairwise
/// distance annihilates the product exactly.
pub fn objective_j(
    set: &PredictedMeasurementSet,
    exponent: SeparationExponent,
) -> Result<Option<f64>> {
    let n = set.members.len();
    if n < 2 {
        return Ok(None);
    }
    let mut sum_log = 0.0;
    for (i, (_, y_i, _)) in set.members.iter().enumerate() {
        for (j, (_, y_j, s_j)) in set.members.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = pairwise_distance(y_i, y_j, s_j)?;
            if d <= 0.0 {
                return Ok(Some(0.0));
            }
            sum_log += d.ln();
        }
    }
    Ok(Some((exponent.value(n) * sum_log).exp()))
}

/// Deterministic candidate controls over a box: `per_axis` evenly spaced
/// values per axis (one midpoint when the axis is pinned or `per_axis` is
/// 1), enumerated with the first axis varying slowest. Endpoints land on
/// the bounds exactly.
pub struct ControlGrid {
    candidates: Vec<DVector<f64>>,
}

impl ControlGrid {
    pub fn over_box(bounds: &ControlBox, per_axis: usize) -> Result<Self> {
        if per_axis == 0 {
            return Err(FidError::Config(
                "control grid needs at least one point per axis".into(),
            ));
        }
        Ok(Self {
            candidates: cartesian(bounds.bounds(), per_axis),
        })
    }

    pub fn candidates(&self) -> &[DVector<f64>] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

fn axis_values(lo: f64, hi: f64, per_axis: usize) -> Vec<f64> {
    if lo == hi || per_axis == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..per_axis)
        .map(|i| {
            let t = i as f64 / (per_axis - 1) as f64;
            lo * (1.0 - t) + hi * t
        })
        .collect()
}

fn cartesian(ranges: &[[f64; 2]], per_axis: usize) -> Vec<DVector<f64>> {
    let axes: Vec<Vec<f64>> = ranges
        .iter()
        .map(|b| axis_values(b[0], b[1], per_axis))
        .collect();
    let total: usize = axes.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; axes.len()];
    loop {
        out.push(DVector::from_iterator(
            axes.len(),
            idx.iter().zip(&axes).map(|(&i, vals)| vals[i]),
        ));
        let mut axis = axes.len();
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < axes[axis].len() {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Sub-box for refinement pass `iter` (1-based): centered on the incumbent
/// with per-axis half-width `width / 2^(iter+1)`, clamped to the box.
fn refined_ranges(bounds: &ControlBox, center: &DVector<f64>, iter: usize) -> Vec<[f64; 2]> {
    bounds
        .bounds()
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let hw = (b[1] - b[0]) * 0.5f64.powi(iter as i32 + 1);
            [(center[i] - hw).max(b[0]), (center[i] + hw).min(b[1])]
        })
        .collect()
}

/// What one active selection produced.
#[derive(Clone, Debug)]
pub struct SelectionOutcome {
    pub u: DVector<f64>,
    /// Objective value at `u`; zero when the step fell back.
    pub objective: f64,
    /// False when no candidate separated the live hypotheses (fewer than
    /// two live, or `J = 0` everywhere) and the nominal control was used.
    pub informative: bool,
}

fn live_mask(bank: &FilterBank, belief: &Belief) -> Vec<bool> {
    (0..bank.len())
        .map(|m| !bank.filter(m).diverged() && belief.get(m) > 0.0)
        .collect()
}

/// Incumbent update with the tie rules: strictly larger objective wins, an
/// exact tie goes to the strictly smaller control norm, and remaining ties
/// keep the earlier candidate (lowest grid index, earliest pass).
fn consider(best: &mut Option<(f64, DVector<f64>, f64)>, j: f64, u: &DVector<f64>) {
    let norm = u.norm();
    let better = match best {
        None => true,
        Some((bj, _, bn)) => j > *bj || (j == *bj && norm < *bn),
    };
    if better {
        *best = Some((j, u.clone(), norm));
    }
}

/// Maximizes the separation objective over the admissible box and returns
/// the winning control. The belief supplies the rejection state (zero
/// belief excludes a hypothesis from the objective, as does a diverged
/// filter); `nominal` is applied instead whenever the objective cannot
/// discriminate. Candidate evaluations are independent and run in
/// parallel; the reduction scans grid order, so the result is
/// deterministic in the bank state and configuration.
pub fn select_control(
    bank: &FilterBank,
    hyp: &HypothesisSet,
    belief: &Belief,
    bounds: &ControlBox,
    nominal: DVector<f64>,
    config: &ActiveConfig,
) -> Result<SelectionOutcome> {
    config.validate()?;
    if bounds.dim() != hyp.n_u() {
        return Err(FidError::DimensionMismatch {
            context: "select_control: admissible box",
            expected: hyp.n_u(),
            actual: bounds.dim(),
        });
    }
    if belief.len() != hyp.len() {
        return Err(FidError::DimensionMismatch {
            context: "select_control: belief",
            expected: hyp.len(),
            actual: belief.len(),
        });
    }

    let live = live_mask(bank, belief);
    let fallback = |u: DVector<f64>| SelectionOutcome {
        u,
        objective: 0.0,
        informative: false,
    };
    if live.iter().filter(|&&l| l).count() < 2 {
        return Ok(fallback(nominal));
    }

    let evaluate = |u: &DVector<f64>| -> Result<f64> {
        let set = PredictedMeasurementSet::lookahead(bank, hyp, &live, u);
        Ok(objective_j(&set, config.exponent)?.unwrap_or(0.0))
    };

    let mut best: Option<(f64, DVector<f64>, f64)> = None;
    let scan = |candidates: &[DVector<f64>],
                    best: &mut Option<(f64, DVector<f64>, f64)>|
     -> Result<()> {
        let scores: Vec<f64> = candidates
            .par_iter()
            .map(evaluate)
            .collect::<Result<Vec<f64>>>()?;
        for (u, j) in candidates.iter().zip(&scores) {
            consider(best, *j, u);
        }
        Ok(())
    };

    let grid = ControlGrid::over_box(bounds, config.grid_per_axis)?;
    scan(grid.candidates(), &mut best)?;
    for iter in 1..=config.refine_iters {
        let center = best
            .as_ref()
            .map(|(_, u, _)| u.clone())
            .expect("grid is nonempty");
        let sub = cartesian(
            &refined_ranges(bounds, &center, iter),
            config.grid_per_axis,
        );
        scan(&sub, &mut best)?;
    }

    let (j, u, _) = best.expect("grid is nonempty");
    if j > 0.0 {
        Ok(SelectionOutcome {
            u,
            objective: j,
            informative: true,
        })
    } else {
        Ok(fallback(nominal))
    }
}

/// Sampled check of input-design degeneracy: true when the objective is
/// constant (within `1e-9` relative) across a `samples`-per-axis grid over
/// the admissible box, including the vacuous case where it is undefined
/// everywhere. A sampled approximation of "constant over the whole set",
/// not an exhaustive certificate; `samples` below 2 is promoted to 2.
pub fn is_degenerate(
    bank: &FilterBank,
    hyp: &HypothesisSet,
    belief: &Belief,
    bounds: &ControlBox,
    samples: usize,
    config: &ActiveConfig,
) -> Result<bool> {
    let live = live_mask(bank, belief);
    let grid = ControlGrid::over_box(bounds, samples.max(2))?;
    let mut defined = Vec::with_capacity(grid.len());
    let mut undefined = 0usize;
    for u in grid.candidates() {
        let set = PredictedMeasurementSet::lookahead(bank, hyp, &live, u);
        match objective_j(&set, config.exponent)? {
            Some(j) => defined.push(j),
            None => undefined += 1,
        }
    }
    if defined.is_empty() {
        return Ok(true);
    }
    if undefined > 0 {
        return Ok(false);
    }
    let max = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = defined.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min <= DEGENERACY_REL_TOL * max)
}

/// Active identification: after each belief update, the next control
/// maximizes the separation objective over the scenario's admissible box.
/// Steps where the objective cannot discriminate (fewer than two live
/// hypotheses, or zero separation everywhere) fall back to the nominal
/// policy and are marked non-informative in the trace. Control-authority
/// studies swap the box via [`Scenario::with_admissible`] beforehand.
pub fn active_fid_run(
    scenario: &Scenario,
    config: &EngineConfig,
    active: &ActiveConfig,
    rng: &mut FidRng,
) -> Result<TrialRun> {
    active.validate()?;
    let policy = scenario.policy().clone();
    let hyp = scenario.hypotheses();
    let bounds = scenario.admissible().clone();
    run_identification(scenario, config, rng, move |bank, belief, k| {
        let x_ref = bank.filter(belief.argmax()).mean().clone();
        let nominal = policy.control(&x_ref, k);
        let sel = select_control(bank, hyp, belief, &bounds, nominal, active)?;
        Ok(ControlChoice {
            u: sel.u,
            informative: Some(sel.informative),
        })
    })
}
