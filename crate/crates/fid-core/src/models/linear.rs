//! Linear state-space models and the configurable scalar-gain scenario.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{FidError, Result};
use crate::models::{
    ControlBox, ControlPolicy, HypothesisSet, Scenario, ScenarioConfig, SystemModel, Truth,
};

/// Builds `x' = A x + B u`, `y = C x` with analytic Jacobians attached.
pub fn linear_model(
    label: impl Into<String>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
) -> Result<SystemModel> {
    let n_x = a.nrows();
    if a.ncols() != n_x {
        return Err(FidError::Config("A must be square".into()));
    }
    if b.nrows() != n_x {
        return Err(FidError::Config("B row count must match A".into()));
    }
    if c.ncols() != n_x {
        return Err(FidError::Config("C column count must match A".into()));
    }
    let n_u = b.ncols();
    let n_y = c.nrows();

    let a_dyn = a.clone();
    let b_dyn = b;
    let c_meas = c.clone();
    let model = SystemModel::new(
        label,
        n_x,
        n_u,
        n_y,
        Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| &a_dyn * x + &b_dyn * u),
        Arc::new(move |x: &DVector<f64>| &c_meas * x),
        q,
        r,
    )?;
    Ok(model
        .with_dynamics_jacobian(Arc::new(move |_, _| a.clone()))
        .with_measurement_jacobian(Arc::new(move |_| c.clone())))
}

fn gain_model(gain: f64, label: String, q: f64, r: f64) -> Result<SystemModel> {
    linear_model(
        label,
        DMatrix::identity(1, 1),
        DMatrix::from_element(1, 1, gain),
        DMatrix::identity(1, 1),
        DMatrix::from_element(1, 1, q),
        DMatrix::from_element(1, 1, r),
    )
}

/// Scalar linear-gain scenario (`scenario = "custom"`): one hypothesis per
/// configured gain, truth drawn uniformly from the set with probability
/// `pi_star`, otherwise an unmodeled gain halfway between the first two.
pub(super) fn build(config: &ScenarioConfig) -> Result<Scenario> {
    let p = config.fault_params.custom.clone();
    if p.gains.len() < 2 {
        return Err(FidError::Config(
            "custom scenario needs at least two gains".into(),
        ));
    }
    let q = p.q_std * p.q_std * if config.scale_process_noise { config.noise_scale } else { 1.0 };
    let r = p.r_std * p.r_std * config.noise_scale;

    let mut models = Vec::with_capacity(p.gains.len());
    for &g in &p.gains {
        models.push(gain_model(g, format!("gain_{g}"), q, r)?);
    }
    let hypotheses = HypothesisSet::new(models)?;
    let truth = Truth {
        model: hypotheses[0].clone(),
        index: Some(0),
    };

    let bounds = match &config.control_bounds {
        Some(b) => b.clone(),
        None => vec![[-p.u_max, p.u_max]],
    };
    let admissible = ControlBox::new(bounds)?;

    let unmodeled_gain = p.unmodeled_gain.unwrap_or(0.5 * (p.gains[0] + p.gains[1]));
    let pi_star = config.pi_star;
    let mismatch = config.mismatch;
    let gains = p.gains.clone();
    let u_max = p.u_max;
    let hyp_for_sampler = hypotheses.clone();
    let sampler = Arc::new(move |rng: &mut crate::FidRng| -> Result<Truth> {
        let in_set = rng.random_range(0.0..1.0) < pi_star;
        let pick = rng.random_range(0..gains.len());
        let dev = mismatch.fault_param_dev * rng.random_range(-1.0..1.0);
        let dist = mismatch.disturbance_scale * u_max * rng.random_range(-1.0..1.0);
        let exact = dev == 0.0 && dist == 0.0;
        if in_set && exact {
            return Ok(Truth {
                model: hyp_for_sampler[pick].clone(),
                index: Some(pick),
            });
        }
        let (gain, label, index) = if in_set {
            (gains[pick], format!("gain_{}", gains[pick]), Some(pick))
        } else {
            (unmodeled_gain, format!("unmodeled_gain_{unmodeled_gain}"), None)
        };
        let g_true = gain * (1.0 + dev);
        let model = linear_model(
            label,
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, g_true),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
        )?;
        // A constant input disturbance enters like a dynamics bias.
        let model = if dist != 0.0 {
            let base = model;
            let label = base.label().to_string();
            SystemModel::new(
                label,
                1,
                1,
                1,
                Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| {
                    DVector::from_element(1, x[0] + g_true * u[0] + dist)
                }),
                Arc::new(|x: &DVector<f64>| x.clone()),
                DMatrix::from_element(1, 1, q),
                DMatrix::from_element(1, 1, r),
            )?
        } else {
            model
        };
        Ok(Truth { model, index })
    });

    Scenario::new(
        "custom",
        hypotheses,
        truth,
        DVector::zeros(1),
        DMatrix::from_element(1, 1, p.x0_std * p.x0_std),
        ControlPolicy::Constant(DVector::from_element(1, p.passive_u)),
        admissible,
        config.horizon,
        Some(sampler),
    )
}
