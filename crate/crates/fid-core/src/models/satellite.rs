//! Rigid-body satellite attitude scenario.
//!
//! State is `[sigma, omega]` with `sigma` the modified Rodrigues parameters
//! of the body attitude and `omega` the body angular rate. Kinematics and
//! Euler dynamics:
//!
//! ```text
//! sigma' = 1/4 B(sigma) omega
//! omega' = J^-1 (-omega x (J omega) + Lambda u + d)
//! B(s)   = (1 - s's) I + 2 skew(s) + 2 s s'
//! ```
//!
//! `Lambda` is a per-axis torque effectiveness matrix; each fault hypothesis
//! derates one actuator axis. The full state is measured. Integration is RK4
//! with substeps; whenever a substep leaves the MRP unit ball the shadow-set
//! switch `s -> -s / (s's)` is applied and its Jacobian composed into the
//! discrete transition Jacobian.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;

use crate::error::Result;
use crate::models::{
    rk4_step, rk4_step_with_jacobian, ControlBox, ControlPolicy, HypothesisSet,
    SatelliteParams, Scenario, ScenarioConfig, SystemModel, Truth,
};

#[derive(Clone, Copy, Debug)]
struct SatPhysics {
    inertia: [f64; 3],
    /// Per-axis torque effectiveness (1 everywhere on the nominal model).
    lambda: [f64; 3],
    /// Constant body-frame disturbance torque (mismatch studies).
    d: [f64; 3],
    dt_sub: f64,
    substeps: u32,
}

fn mrp_b_matrix(s: &Vector3<f64>) -> Matrix3<f64> {
    let n = s.norm_squared();
    Matrix3::identity() * (1.0 - n) + skew(s) * 2.0 + s * s.transpose() * 2.0
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

fn split(x: &DVector<f64>) -> (Vector3<f64>, Vector3<f64>) {
    (
        Vector3::new(x[0], x[1], x[2]),
        Vector3::new(x[3], x[4], x[5]),
    )
}

fn rhs(ph: &SatPhysics, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let (s, w) = split(x);
    let sigma_dot = mrp_b_matrix(&s) * w * 0.25;
    let jw = Vector3::new(
        ph.inertia[0] * w[0],
        ph.inertia[1] * w[1],
        ph.inertia[2] * w[2],
    );
    let gyro = -w.cross(&jw);
    let mut out = DVector::zeros(6);
    for i in 0..3 {
        out[i] = sigma_dot[i];
        out[3 + i] = (gyro[i] + ph.lambda[i] * u[i] + ph.d[i]) / ph.inertia[i];
    }
    out
}

fn rhs_jacobian(ph: &SatPhysics, x: &DVector<f64>) -> DMatrix<f64> {
    let (s, w) = split(x);
    // d(sigma')/d(sigma) = 1/4 (-2 w s' - 2 skew(w) + 2 (s'w) I + 2 s w')
    let dss = (-w * s.transpose() * 2.0 - skew(&w) * 2.0
        + Matrix3::identity() * (2.0 * s.dot(&w))
        + s * w.transpose() * 2.0)
        * 0.25;
    let dsw = mrp_b_matrix(&s) * 0.25;
    // d(omega')/d(omega) = J^-1 (skew(J w) - skew(w) J)
    let j = Matrix3::from_diagonal(&Vector3::new(
        ph.inertia[0],
        ph.inertia[1],
        ph.inertia[2],
    ));
    let j_inv = Matrix3::from_diagonal(&Vector3::new(
        1.0 / ph.inertia[0],
        1.0 / ph.inertia[1],
        1.0 / ph.inertia[2],
    ));
    let dww = j_inv * (skew(&(j * w)) - skew(&w) * j);

    let mut a = DMatrix::zeros(6, 6);
    for r in 0..3 {
        for c in 0..3 {
            a[(r, c)] = dss[(r, c)];
            a[(r, 3 + c)] = dsw[(r, c)];
            a[(3 + r, 3 + c)] = dww[(r, c)];
        }
    }
    a
}

/// Shadow-set switch on the full state; returns the switched state and
/// whether the switch fired.
fn shadow_state(x: &DVector<f64>) -> (DVector<f64>, bool) {
    let (s, _) = split(x);
    if s.norm_squared() > 1.0 {
        let mut out = x.clone();
        let sw = -s / s.norm_squared();
        for i in 0..3 {
            out[i] = sw[i];
        }
        (out, true)
    } else {
        (x.clone(), false)
    }
}

/// Jacobian of `s -> -s / (s's)` embedded in the 6-state, evaluated at the
/// pre-switch sigma.
fn shadow_jacobian(x_pre: &DVector<f64>) -> DMatrix<f64> {
    let (s, _) = split(x_pre);
    let n = s.norm_squared();
    let dss = (s * s.transpose() * 2.0 - Matrix3::identity() * n) / (n * n);
    let mut j = DMatrix::identity(6, 6);
    for r in 0..3 {
        for c in 0..3 {
            j[(r, c)] = dss[(r, c)];
        }
    }
    j
}

fn discrete_step(ph: &SatPhysics, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let f = |x: &DVector<f64>| rhs(ph, x, u);
    let mut state = x.clone();
    for _ in 0..ph.substeps {
        state = rk4_step(&f, &state, ph.dt_sub);
        state = shadow_state(&state).0;
    }
    state
}

fn discrete_jacobian(ph: &SatPhysics, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let f = |x: &DVector<f64>| rhs(ph, x, u);
    let a = |x: &DVector<f64>| rhs_jacobian(ph, x);
    let mut state = x.clone();
    let mut phi = DMatrix::<f64>::identity(6, 6);
    for _ in 0..ph.substeps {
        let (next, phi_sub) = rk4_step_with_jacobian(&f, &a, &state, ph.dt_sub);
        let (switched, fired) = shadow_state(&next);
        phi = if fired {
            shadow_jacobian(&next) * phi_sub * phi
        } else {
            phi_sub * phi
        };
        state = switched;
    }
    phi
}

fn make_model(
    label: String,
    p: &SatelliteParams,
    lambda: [f64; 3],
    d: [f64; 3],
    q_scale: f64,
    r_scale: f64,
    dt: f64,
    substeps: u32,
) -> Result<SystemModel> {
    let ph = SatPhysics {
        inertia: p.inertia,
        lambda,
        d,
        dt_sub: dt / substeps as f64,
        substeps,
    };
    let qs = p.process_noise_sigma * p.process_noise_sigma * q_scale;
    let qw = p.process_noise_omega * p.process_noise_omega * q_scale;
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![qs, qs, qs, qw, qw, qw]));
    let rs = p.sigma_noise * p.sigma_noise * r_scale;
    let rw = p.omega_noise * p.omega_noise * r_scale;
    let r = DMatrix::from_diagonal(&DVector::from_vec(vec![rs, rs, rs, rw, rw, rw]));

    let ph_dyn = ph;
    let ph_jac = ph;
    let model = SystemModel::new(
        label,
        6,
        3,
        6,
        Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| discrete_step(&ph_dyn, x, u)),
        Arc::new(|x: &DVector<f64>| x.clone()),
        q,
        r,
    )?;
    Ok(model
        .with_dynamics_jacobian(Arc::new(move |x: &DVector<f64>, u: &DVector<f64>| {
            discrete_jacobian(&ph_jac, x, u)
        }))
        .with_measurement_jacobian(Arc::new(|_| DMatrix::identity(6, 6))))
}

const LABELS: [&str; 4] = ["nominal", "torque_loss_x", "torque_loss_y", "torque_loss_z"];

fn lambda_vector(fault: usize, factor: f64) -> [f64; 3] {
    let mut lambda = [1.0, 1.0, 1.0];
    if fault > 0 {
        lambda[fault - 1] = factor;
    }
    lambda
}

pub(super) fn build(config: &ScenarioConfig) -> Result<Scenario> {
    let p = config.fault_params.mars_satellite.clone();
    let q_scale = if config.scale_process_noise { config.noise_scale } else { 1.0 };
    let r_scale = config.noise_scale;
    let dt = config.dt;
    let substeps = config.rk4_substeps;

    let mut models = Vec::with_capacity(4);
    for (fault, label) in LABELS.iter().enumerate() {
        models.push(make_model(
            label.to_string(),
            &p,
            lambda_vector(fault, p.torque_factor),
            [0.0; 3],
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
        None => vec![[-p.u_max, p.u_max]; 3],
    };
    let admissible = ControlBox::new(bounds)?;

    let kp = p.kp;
    let kd = p.kd;
    let u_cap = p.u_max;
    let maneuver_time = p.maneuver_time;
    let maneuver_sigma = Vector3::new(
        p.maneuver_sigma[0],
        p.maneuver_sigma[1],
        p.maneuver_sigma[2],
    );
    let policy = ControlPolicy::Feedback(Arc::new(move |x: &DVector<f64>, k: usize| {
        let (s, w) = split(x);
        let s_ref = if k >= maneuver_time {
            maneuver_sigma
        } else {
            Vector3::zeros()
        };
        let raw = -(s - s_ref) * kp - w * kd;
        DVector::from_iterator(3, raw.iter().map(|v| v.clamp(-u_cap, u_cap)))
    }));

    let pi_star = config.pi_star;
    let mismatch = config.mismatch;
    let params = p.clone();
    let hyp_for_sampler = hypotheses.clone();
    let sampler = Arc::new(move |rng: &mut crate::FidRng| -> Result<Truth> {
        let in_set = rng.random_range(0.0..1.0) < pi_star;
        let pick = rng.random_range(0..4usize);
        let axis = rng.random_range(0..3usize);
        let dev = mismatch.fault_param_dev * rng.random_range(-1.0..1.0);
        let mut d = [0.0; 3];
        for slot in d.iter_mut() {
            *slot = mismatch.disturbance_scale * params.u_max * rng.random_range(-1.0..1.0);
        }

        if in_set && dev == 0.0 && d == [0.0; 3] {
            return Ok(Truth {
                model: hyp_for_sampler[pick].clone(),
                index: Some(pick),
            });
        }
        let (mut lambda, label, index) = if in_set {
            (
                lambda_vector(pick, params.torque_factor),
                LABELS[pick].to_string(),
                Some(pick),
            )
        } else {
            // Unmodeled: effectiveness halfway between nominal and the
            // modeled derating on a random axis.
            let mut lambda = [1.0, 1.0, 1.0];
            lambda[axis] = 0.5 * (1.0 + params.torque_factor);
            (lambda, format!("unmodeled_torque_{axis}"), None)
        };
        for l in lambda.iter_mut() {
            if *l != 1.0 {
                *l *= 1.0 + dev;
            }
        }
        let model = make_model(label, &params, lambda, d, q_scale, r_scale, dt, substeps)?;
        Ok(Truth { model, index })
    });

    let x0_mean = DVector::from_vec(vec![
        p.x0_sigma[0],
        p.x0_sigma[1],
        p.x0_sigma[2],
        p.x0_omega[0],
        p.x0_omega[1],
        p.x0_omega[2],
    ]);
    let ss = p.x0_sigma_std * p.x0_sigma_std;
    let sw = p.x0_omega_std * p.x0_omega_std;
    let x0_cov = DMatrix::from_diagonal(&DVector::from_vec(vec![ss, ss, ss, sw, sw, sw]));

    Scenario::new(
        "mars_satellite",
        hypotheses,
        truth,
        x0_mean,
        x0_cov,
        policy,
        admissible,
        config.horizon,
        Some(sampler),
    )
}
