//! Two-hypothesis linear pair distinguishable only through the second
//! control axis.
//!
//! Nominal: `x' = x + u + w`. Mismatched: `x' = x + diag(1, g) u + w` with
//! `g < 1`. Both share `y = x + v`. Any control sequence with `u_2 = 0`
//! produces identical filter predictions for the two hypotheses, so passive
//! identification under the default policy is impossible by construction;
//! exciting the second axis separates them immediately.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::Result;
use crate::models::linear::linear_model;
use crate::models::{
    ControlBox, ControlPolicy, HypothesisSet, Scenario, ScenarioConfig, SystemModel, Truth,
};

fn pair_model(label: &str, gain2: f64, q: f64, r: f64) -> Result<SystemModel> {
    linear_model(
        label,
        DMatrix::identity(2, 2),
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, gain2])),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * q,
        DMatrix::identity(2, 2) * r,
    )
}

pub(super) fn build(config: &ScenarioConfig) -> Result<Scenario> {
    let p = config.fault_params.example1.clone();
    let q = p.q_std * p.q_std * if config.scale_process_noise { config.noise_scale } else { 1.0 };
    let r = p.r_std * p.r_std * config.noise_scale;

    let nominal = pair_model("nominal", 1.0, q, r)?;
    let reduced = pair_model("reduced_u2_gain", p.gain2, q, r)?;
    let hypotheses = HypothesisSet::new(vec![nominal, reduced])?;
    let truth = Truth {
        model: hypotheses[0].clone(),
        index: Some(0),
    };

    let bounds = match &config.control_bounds {
        Some(b) => b.clone(),
        None => vec![[-p.u_max, p.u_max], [-p.u_max, p.u_max]],
    };
    let admissible = ControlBox::new(bounds)?;

    let pi_star = config.pi_star;
    let mismatch = config.mismatch;
    let gain2 = p.gain2;
    let u_max = p.u_max;
    let hyp_for_sampler = hypotheses.clone();
    let sampler = Arc::new(move |rng: &mut crate::FidRng| -> Result<Truth> {
        let in_set = rng.random_range(0.0..1.0) < pi_star;
        let pick = rng.random_range(0..2usize);
        let dev = mismatch.fault_param_dev * rng.random_range(-1.0..1.0);
        let d0 = mismatch.disturbance_scale * u_max * rng.random_range(-1.0..1.0);
        let d1 = mismatch.disturbance_scale * u_max * rng.random_range(-1.0..1.0);
        let exact = dev == 0.0 && d0 == 0.0 && d1 == 0.0;
        if in_set && exact {
            return Ok(Truth {
                model: hyp_for_sampler[pick].clone(),
                index: Some(pick),
            });
        }
        let (base_gain, label, index) = if in_set {
            let g = if pick == 0 { 1.0 } else { gain2 };
            let label = hyp_for_sampler[pick].label().to_string();
            (g, label, Some(pick))
        } else {
            (0.5 * (1.0 + gain2), "unmodeled_u2_gain".to_string(), None)
        };
        let g_true = base_gain * (1.0 + dev);
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, g_true]));
        let bias = DVector::from_vec(vec![d0, d1]);
        let model = SystemModel::new(
            label,
            2,
            2,
            2,
            Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| x + &b * u + &bias),
            Arc::new(|x: &DVector<f64>| x.clone()),
            DMatrix::identity(2, 2) * q,
            DMatrix::identity(2, 2) * r,
        )?
        .with_dynamics_jacobian(Arc::new(|_, _| DMatrix::identity(2, 2)))
        .with_measurement_jacobian(Arc::new(|_| DMatrix::identity(2, 2)));
        Ok(Truth { model, index })
    });

    Scenario::new(
        "example1",
        hypotheses,
        truth,
        DVector::zeros(2),
        DMatrix::identity(2, 2) * (p.x0_std * p.x0_std),
        ControlPolicy::Constant(DVector::from_vec(vec![p.passive_u1, 0.0])),
        admissible,
        config.horizon,
        Some(sampler),
    )
}
