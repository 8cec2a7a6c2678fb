//! Gravity-drain two-tank scenario.
//!
//! State is the pair of levels `(h1, h2)`; the single control is the inflow
//! into tank 1. Torricelli outflow through three orifices: tank-1 ambient
//! drain, tank-1 to tank-2 coupling, and the tank-2 outlet,
//!
//! ```text
//! A1 h1' = u - ce1 sqrt(h1) - ce12 s(h1 - h2)
//! A2 h2' = ce12 s(h1 - h2) - ce2 sqrt(h2)
//! ```
//!
//! with `s(d) = sign(d) sqrt(|d|)` and square roots clamped at zero level.
//! Each fault hypothesis multiplies one orifice coefficient by a leak factor;
//! both levels are measured. Integration is RK4 with substeps, and
//! models carry the exact analytic Jacobian of the discrete map (the
//! finite-difference path is cross-checked against it in tests).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::Result;
use crate::models::{
    rk4_step, rk4_step_with_jacobian, ControlBox, ControlPolicy, HypothesisSet, Scenario,
    ScenarioConfig, SystemModel, Truth, TwoTankParams,
};

/// Below this level/head the outflow derivative is treated as zero to keep
/// Jacobians finite at empty tanks.
const LEVEL_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
struct TankPhysics {
    a1: f64,
    a2: f64,
    /// Effective orifice coefficients, leak factors applied.
    ce1: f64,
    ce12: f64,
    ce2: f64,
    /// Constant inflow disturbance on tank 1 (mismatch studies).
    bias: f64,
    dt_sub: f64,
    substeps: u32,
}

fn sq(h: f64) -> f64 {
    h.max(0.0).sqrt()
}

fn dsq(h: f64) -> f64 {
    if h > LEVEL_EPS {
        0.5 / h.sqrt()
    } else {
        0.0
    }
}

fn signed_sqrt(d: f64) -> f64 {
    if d >= 0.0 {
        d.sqrt()
    } else {
        -(-d).sqrt()
    }
}

fn dsigned_sqrt(d: f64) -> f64 {
    if d.abs() > LEVEL_EPS {
        0.5 / d.abs().sqrt()
    } else {
        0.0
    }
}

fn rhs(ph: &TankPhysics, x: &DVector<f64>, u0: f64) -> DVector<f64> {
    let (h1, h2) = (x[0], x[1]);
    let q12 = ph.ce12 * signed_sqrt(h1 - h2);
    DVector::from_vec(vec![
        (u0 + ph.bias - ph.ce1 * sq(h1) - q12) / ph.a1,
        (q12 - ph.ce2 * sq(h2)) / ph.a2,
    ])
}

fn rhs_jacobian(ph: &TankPhysics, x: &DVector<f64>) -> DMatrix<f64> {
    let (h1, h2) = (x[0], x[1]);
    let dq = ph.ce12 * dsigned_sqrt(h1 - h2);
    DMatrix::from_row_slice(
        2,
        2,
        &[
            (-ph.ce1 * dsq(h1) - dq) / ph.a1,
            dq / ph.a1,
            dq / ph.a2,
            (-dq - ph.ce2 * dsq(h2)) / ph.a2,
        ],
    )
}

fn discrete_step(ph: &TankPhysics, x: &DVector<f64>, u0: f64) -> DVector<f64> {
    let f = |x: &DVector<f64>| rhs(ph, x, u0);
    let mut state = x.clone();
    for _ in 0..ph.substeps {
        state = rk4_step(&f, &state, ph.dt_sub);
    }
    state
}

fn discrete_jacobian(ph: &TankPhysics, x: &DVector<f64>, u0: f64) -> DMatrix<f64> {
    let f = |x: &DVector<f64>| rhs(ph, x, u0);
    let a = |x: &DVector<f64>| rhs_jacobian(ph, x);
    let mut state = x.clone();
    let mut phi = DMatrix::<f64>::identity(2, 2);
    for _ in 0..ph.substeps {
        let (next, phi_sub) = rk4_step_with_jacobian(&f, &a, &state, ph.dt_sub);
        phi = phi_sub * phi;
        state = next;
    }
    phi
}

fn make_model(
    label: String,
    p: &TwoTankParams,
    leak: [f64; 3],
    bias: f64,
    q_scale: f64,
    r_scale: f64,
    dt: f64,
    substeps: u32,
) -> Result<SystemModel> {
    let ph = TankPhysics {
        a1: p.area[0],
        a2: p.area[1],
        ce1: p.c_drain1 * leak[0],
        ce12: p.c_coupling * leak[1],
        ce2: p.c_drain2 * leak[2],
        bias,
        dt_sub: dt / substeps as f64,
        substeps,
    };
    let q = DMatrix::identity(2, 2) * (p.process_noise * p.process_noise * q_scale);
    let r = DMatrix::identity(2, 2) * (p.meas_noise * p.meas_noise * r_scale);

    let ph_dyn = ph;
    let ph_jac = ph;
    let model = SystemModel::new(
        label,
        2,
        1,
        2,
        Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| discrete_step(&ph_dyn, x, u[0])),
        Arc::new(|x: &DVector<f64>| x.clone()),
        q,
        r,
    )?;
    Ok(model
        .with_dynamics_jacobian(Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| {
            discrete_jacobian(&ph_jac, x, u[0])
        }))
        .with_measurement_jacobian(Arc::new(|_| DMatrix::identity(2, 2))))
}

const LABELS: [&str; 4] = ["nominal", "leak_tank1", "leak_tank1_to_tank2", "leak_tank2"];

fn leak_vector(fault: usize, factors: &[f64; 3]) -> [f64; 3] {
    let mut leak = [1.0, 1.0, 1.0];
    if fault > 0 {
        leak[fault - 1] = factors[fault - 1];
    }
    leak
}

pub(super) fn build(config: &ScenarioConfig) -> Result<Scenario> {
    let p = config.fault_params.two_tank.clone();
    let q_scale = if config.scale_process_noise { config.noise_scale } else { 1.0 };
    let r_scale = config.noise_scale;
    let dt = config.dt;
    let substeps = config.rk4_substeps;

    let mut models = Vec::with_capacity(4);
    for (fault, label) in LABELS.iter().enumerate() {
        models.push(make_model(
            label.to_string(),
            &p,
            leak_vector(fault, &p.leak_factors),
            0.0,
            q_scale,
            r_scale,
            dt,
            substeps,
        )?);
    }
    let hypotheses = HypothesisSet::new(models)?;
    let truth = Truth {
        model: hypotheses[0].clone(),
        index: Some(0),
    };

    let bounds = match &config.control_bounds {
        Some(b) => b.clone(),
        None => vec![[0.0, p.u_max]],
    };
    let admissible = ControlBox::new(bounds)?;

    let pi_star = config.pi_star;
    let mismatch = config.mismatch;
    let params = p.clone();
    let hyp_for_sampler = hypotheses.clone();
    let sampler = Arc::new(move |rng: &mut crate::FidRng| -> Result<Truth> {
        let in_set = rng.random_range(0.0..1.0) < pi_star;
        let pick = rng.random_range(0..4usize);
        let orifice = rng.random_range(0..3usize);
        let dev = mismatch.fault_param_dev * rng.random_range(-1.0..1.0);
        let bias = mismatch.disturbance_scale * params.u_max * rng.random_range(-1.0..1.0);

        if in_set && dev == 0.0 && bias == 0.0 {
            return Ok(Truth {
                model: hyp_for_sampler[pick].clone(),
                index: Some(pick),
            });
        }
        let (mut leak, label, index) = if in_set {
            (
                leak_vector(pick, &params.leak_factors),
                LABELS[pick].to_string(),
                Some(pick),
            )
        } else {
            // Unmodeled: a leak halfway between nominal and the modeled fault
            // on a random orifice.
            let mut leak = [1.0, 1.0, 1.0];
            leak[orifice] = 0.5 * (1.0 + params.leak_factors[orifice]);
            (leak, format!("unmodeled_leak_{orifice}"), None)
        };
        // The fault-parameter deviation perturbs leak factors, not nominal 1s.
        for l in leak.iter_mut() {
            if *l != 1.0 {
                *l *= 1.0 + dev;
            }
        }
        let model = make_model(label, &params, leak, bias, q_scale, r_scale, dt, substeps)?;
        Ok(Truth { model, index })
    });

    Scenario::new(
        "two_tank",
        hypotheses,
        truth,
        DVector::from_vec(vec![p.x0_mean[0], p.x0_mean[1]]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![
            p.x0_std[0] * p.x0_std[0],
            p.x0_std[1] * p.x0_std[1],
        ])),
        ControlPolicy::Constant(DVector::from_element(1, p.inflow)),
        admissible,
        config.horizon,
        Some(sampler),
    )
}
