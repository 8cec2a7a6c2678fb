//! Per-hypothesis extended Kalman filtering.
//!
//! Each fault hypothesis runs one EKF against the shared control/measurement
//! stream. The predict step propagates mean and covariance through the
//! hypothesis dynamics,
//!
//! ```text
//! x_pred = F(x, u)            cov_pred = phi cov phi' + Q
//! y_pred = G(x_pred)          S = H cov_pred H' + R
//! K      = cov_pred H' S^-1
//! ```
//!
//! and the update step folds in the innovation `e = y - y_pred`:
//!
//! ```text
//! x <- x_pred + K e           cov <- (I - K H) cov_pred
//! ```
//!
//! Covariances are symmetrized after every update; the Joseph-form update is
//! available behind [`FilterConfig::joseph_form`]. At `k = 0` there is no
//! dynamics step: [`FilterState::predict_from_prior`] runs the measurement
//! half directly on the initial prior.
//!
//! Filters do not prove stability; a sticky divergence detector stands in
//! for it. Non-finite state, a covariance trace cap, or a cap on the running
//! mean of the innovation statistic all mark the filter diverged, and a
//! diverged filter stays diverged.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{FidError, Result};
use crate::linalg;
use crate::models::{HypothesisSet, SystemModel};

/// Divergence caps and covariance-update variant shared by a filter bank.
#[derive(Clone, Copy, Debug)]
pub struct FilterConfig {
    /// Covariance trace above this marks the filter diverged.
    pub trace_cap: f64,
    /// Running-mean innovation statistic above this marks the filter
    /// diverged.
    pub stat_mean_cap: f64,
    /// Use the Joseph-form covariance update instead of `(I - KH) cov`.
    pub joseph_form: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            trace_cap: 1e6,
            stat_mean_cap: 1e3,
            joseph_form: false,
        }
    }
}

/// Everything the measurement update needs from one predict step.
pub struct PredictedState {
    pub x_pred: DVector<f64>,
    pub cov_pred: DMatrix<f64>,
    pub y_pred: DVector<f64>,
    pub s: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    s_chol: Cholesky<f64, Dyn>,
}

/// Per-step innovation quantities produced by one update, consumed by the
/// windowed likelihood machinery.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub y_pred: DVector<f64>,
    pub innovation: DVector<f64>,
    pub s: DMatrix<f64>,
    /// Innovation statistic `e' S^-1 e`.
    pub stat: f64,
    /// Gaussian log-density of the innovation, `-(stat + n_y ln 2pi + ln det S)/2`.
    pub loglik: f64,
}

/// One hypothesis's EKF state.
#[derive(Clone, Debug)]
pub struct FilterState {
    x: DVector<f64>,
    cov: DMatrix<f64>,
    last: Option<StepRecord>,
    diverged: bool,
    updates: usize,
}

impl FilterState {
    pub fn new(x0: &DVector<f64>, cov0: &DMatrix<f64>) -> Result<Self> {
        if !linalg::all_finite_vec(x0) || !linalg::all_finite_mat(cov0) {
            return Err(FidError::NonFinite("filter prior"));
        }
        if cov0.nrows() != x0.len() || cov0.ncols() != x0.len() {
            return Err(FidError::DimensionMismatch {
                context: "filter prior covariance",
                expected: x0.len(),
                actual: cov0.nrows(),
            });
        }
        if !linalg::is_symmetric(cov0, linalg::SYMMETRY_TOL) {
            return Err(FidError::NotSpd {
                context: "filter prior covariance",
            });
        }
        let mut cov = cov0.clone();
        linalg::symmetrize(&mut cov);
        Ok(Self {
            x: x0.clone(),
            cov,
            last: None,
            diverged: false,
            updates: 0,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Innovation record from the most recent update, if any.
    pub fn last_record(&self) -> Option<&StepRecord> {
        self.last.as_ref()
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn mark_diverged(&mut self) {
        self.diverged = true;
    }

    /// Dynamics propagation plus measurement prediction for step `k >= 1`.
    /// Failures mark the filter diverged.
    pub fn predict(&mut self, model: &SystemModel, u: &DVector<f64>) -> Result<PredictedState> {
        if self.diverged {
            return Err(FidError::Diverged("predict on a diverged filter".into()));
        }
        match self.predict_readonly(model, u) {
            Ok(ps) => Ok(ps),
            Err(e) => {
                self.diverged = true;
                Err(e)
            }
        }
    }

    /// Same prediction as [`predict`](Self::predict) without touching the
    /// divergence flag, for hypothetical lookahead over candidate controls.
    pub fn predict_readonly(
        &self,
        model: &SystemModel,
        u: &DVector<f64>,
    ) -> Result<PredictedState> {
        let lin = model.linearize(&self.x, u)?;
        let mut cov_pred = &lin.phi * &self.cov * lin.phi.transpose() + model.q();
        linalg::symmetrize(&mut cov_pred);
        self.build_prediction(model, lin.x_pred, cov_pred, lin.h)
    }

    /// Measurement-only prediction from the prior, used at `k = 0` where no
    /// control has acted yet.
    pub fn predict_from_prior(&mut self, model: &SystemModel) -> Result<PredictedState> {
        if self.diverged {
            return Err(FidError::Diverged("predict on a diverged filter".into()));
        }
        let built = model
            .measurement_jacobian(&self.x)
            .and_then(|h| self.build_prediction(model, self.x.clone(), self.cov.clone(), h));
        match built {
            Ok(ps) => Ok(ps),
            Err(e) => {
                self.diverged = true;
                Err(e)
            }
        }
    }

    fn build_prediction(
        &self,
        model: &SystemModel,
        x_pred: DVector<f64>,
        cov_pred: DMatrix<f64>,
        h: DMatrix<f64>,
    ) -> Result<PredictedState> {
        let y_pred = model.measure_deterministic(&x_pred)?;
        let mut s = &h * &cov_pred * h.transpose() + model.r();
        linalg::symmetrize(&mut s);
        let s_chol = linalg::cholesky_spd(&s, "innovation covariance")?;
        let gain = s_chol.solve(&(&h * &cov_pred)).transpose();
        if !linalg::all_finite_vec(&x_pred)
            || !linalg::all_finite_mat(&cov_pred)
            || !linalg::all_finite_mat(&gain)
        {
            return Err(FidError::NonFinite("filter predict"));
        }
        Ok(PredictedState {
            x_pred,
            cov_pred,
            y_pred,
            s,
            gain,
            h,
            r: model.r().clone(),
            s_chol,
        })
    }

    /// Folds the measurement `y` into the predicted state.
    pub fn update(
        &mut self,
        ps: &PredictedState,
        y: &DVector<f64>,
        joseph_form: bool,
    ) -> Result<StepRecord> {
        if y.len() != ps.y_pred.len() {
            return Err(FidError::DimensionMismatch {
                context: "measurement",
                expected: ps.y_pred.len(),
                actual: y.len(),
            });
        }
        if !linalg::all_finite_vec(y) {
            return Err(FidError::NonFinite("measurement"));
        }
        let e = y - &ps.y_pred;
        let stat = linalg::quad_form_inv(&ps.s_chol, &e)?;
        let loglik = gaussian_log_density(stat, linalg::log_det(&ps.s_chol), e.len());

        let x = &ps.x_pred + &ps.gain * &e;
        let ikh = DMatrix::identity(x.len(), x.len()) - &ps.gain * &ps.h;
        let mut cov = if joseph_form {
            &ikh * &ps.cov_pred * ikh.transpose() + &ps.gain * &ps.r * ps.gain.transpose()
        } else {
            &ikh * &ps.cov_pred
        };
        linalg::symmetrize(&mut cov);
        if !linalg::all_finite_vec(&x) || !linalg::all_finite_mat(&cov) {
            self.diverged = true;
            return Err(FidError::NonFinite("filter update"));
        }
        self.x = x;
        self.cov = cov;
        self.updates += 1;
        let record = StepRecord {
            y_pred: ps.y_pred.clone(),
            innovation: e,
            s: ps.s.clone(),
            stat,
            loglik,
        };
        self.last = Some(record.clone());
        Ok(record)
    }

    /// Sticky divergence detector: non-finite state, covariance trace above
    /// the cap, or a running mean of recent innovation statistics above the
    /// cap. `recent_stats` may be empty to check only the state itself.
    pub fn check_divergence(&mut self, recent_stats: &[f64], config: &FilterConfig) -> bool {
        if self.diverged {
            return true;
        }
        let state_bad = !linalg::all_finite_vec(&self.x)
            || !linalg::all_finite_mat(&self.cov)
            || self.cov.trace() > config.trace_cap;
        let stats_bad = if recent_stats.is_empty() {
            false
        } else {
            let mean = recent_stats.iter().sum::<f64>() / recent_stats.len() as f64;
            !mean.is_finite() || mean > config.stat_mean_cap
        };
        if state_bad || stats_bad {
            self.diverged = true;
        }
        self.diverged
    }
}

/// Innovation statistic `e' S^-1 e` through an SPD solve.
pub fn innovation_stat(e: &DVector<f64>, s: &DMatrix<f64>) -> Result<f64> {
    let chol = linalg::cholesky_spd(s, "innovation covariance")?;
    linalg::quad_form_inv(&chol, e)
}

/// Log of the zero-mean Gaussian density at an innovation with statistic
/// `stat` and covariance log-determinant `log_det_s`.
pub fn gaussian_log_density(stat: f64, log_det_s: f64, n_y: usize) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    -0.5 * (stat + n_y as f64 * ln_2pi + log_det_s)
}

/// One EKF per hypothesis, index-aligned with the hypothesis set and fed a
/// single shared control/measurement stream.
pub struct FilterBank {
    filters: Vec<FilterState>,
    config: FilterConfig,
}

impl FilterBank {
    pub fn new(
        hypotheses: &HypothesisSet,
        x0: &DVector<f64>,
        cov0: &DMatrix<f64>,
        config: FilterConfig,
    ) -> Result<Self> {
        let mut filters = Vec::with_capacity(hypotheses.len());
        for model in hypotheses.models() {
            if model.n_x() != x0.len() {
                return Err(FidError::DimensionMismatch {
                    context: "filter bank prior",
                    expected: model.n_x(),
                    actual: x0.len(),
                });
            }
            filters.push(FilterState::new(x0, cov0)?);
        }
        Ok(Self { filters, config })
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn filter(&self, idx: usize) -> &FilterState {
        &self.filters[idx]
    }

    pub fn filter_mut(&mut self, idx: usize) -> &mut FilterState {
        &mut self.filters[idx]
    }

    pub fn filters(&self) -> &[FilterState] {
        &self.filters
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    /// Advances every filter one step on the shared stream. `u` is `None`
    /// only at `k = 0`, where filters update straight from the prior. A
    /// `None` entry in the result means that hypothesis's filter is (now)
    /// diverged and produced no usable record this step.
    pub fn step(
        &mut self,
        hypotheses: &HypothesisSet,
        u: Option<&DVector<f64>>,
        y: &DVector<f64>,
    ) -> Vec<Option<StepRecord>> {
        let config = self.config;
        self.filters
            .iter_mut()
            .zip(hypotheses.models())
            .map(|(fs, model)| {
                if fs.diverged() {
                    return None;
                }
                let ps = match u {
                    Some(u) => fs.predict(model, u),
                    None => fs.predict_from_prior(model),
                };
                let ps = match ps {
                    Ok(ps) => ps,
                    Err(_) => {
                        fs.mark_diverged();
                        return None;
                    }
                };
                match fs.update(&ps, y, config.joseph_form) {
                    Ok(record) => {
                        if fs.check_divergence(&[], &config) {
                            None
                        } else {
                            Some(record)
                        }
                    }
                    Err(_) => {
                        fs.mark_diverged();
                        None
                    }
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_scenario, linear_model, ScenarioConfig, ScenarioKind};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    /// Textbook Kalman filter with explicit inverses, coded independently of
    /// the EKF above so the two can cross-check each other.
    mod kalman_oracle {
        use nalgebra::{DMatrix, DVector};

        pub struct Oracle {
            pub a: DMatrix<f64>,
            pub b: DMatrix<f64>,
            pub c: DMatrix<f64>,
            pub q: DMatrix<f64>,
            pub r: DMatrix<f64>,
        }

        pub struct OracleStep {
            pub x: DVector<f64>,
            pub p: DMatrix<f64>,
            pub e: DVector<f64>,
            pub s: DMatrix<f64>,
        }

        impl Oracle {
            pub fn step(
                &self,
                x: &DVector<f64>,
                p: &DMatrix<f64>,
                u: Option<&DVector<f64>>,
                y: &DVector<f64>,
            ) -> OracleStep {
                let (xp, pp) = match u {
                    Some(u) => (
                        &self.a * x + &self.b * u,
                        &self.a * p * self.a.transpose() + &self.q,
                    ),
                    None => (x.clone(), p.clone()),
                };
                let s = &self.c * &pp * self.c.transpose() + &self.r;
                let k = &pp * self.c.transpose() * s.clone().try_inverse().unwrap();
                let e = y - &self.c * &xp;
                let x_new = &xp + &k * &e;
                let ikc = DMatrix::identity(xp.len(), xp.len()) - &k * &self.c;
                OracleStep {
                    x: x_new,
                    p: ikc * pp,
                    e,
                    s,
                }
            }
        }
    }

    fn scalar_model(q: f64, r: f64) -> crate::models::SystemModel {
        linear_model(
            "scalar",
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
        )
        .unwrap()
    }

    use nalgebra::{DMatrix, DVector};

    #[test]
    fn scalar_predict_matches_hand_arithmetic() {
        let model = scalar_model(1.0, 1.0);
        let mut fs = FilterState::new(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let ps = fs.predict(&model, &DVector::from_element(1, 0.5)).unwrap();
        assert_relative_eq!(ps.x_pred[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(ps.cov_pred[(0, 0)], 2.0, epsilon = 1e-15);
        assert_relative_eq!(ps.s[(0, 0)], 3.0, epsilon = 1e-15);
        assert_relative_eq!(ps.gain[(0, 0)], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn scalar_update_matches_hand_arithmetic() {
        let model = scalar_model(1.0, 1.0);
        let mut fs = FilterState::new(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let ps = fs.predict(&model, &DVector::zeros(1)).unwrap();
        // Innovation of 3: gain 2/3 moves the mean by 2, covariance becomes
        // (1 - 2/3) * 2.
        let y = DVector::from_element(1, ps.y_pred[0] + 3.0);
        fs.update(&ps, &y, false).unwrap();
        assert_relative_eq!(fs.mean()[0], ps.x_pred[0] + 2.0, epsilon = 1e-14);
        assert_relative_eq!(fs.covariance()[(0, 0)], 2.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn prior_update_matches_hand_arithmetic() {
        // Prior N(0, 1), R = 1, C = 1: S = 2, K = 1/2, so y = 2 pulls the
        // mean to 1 and halves the variance.
        let model = scalar_model(1.0, 1.0);
        let mut fs = FilterState::new(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let ps = fs.predict_from_prior(&model).unwrap();
        assert_relative_eq!(ps.s[(0, 0)], 2.0, epsilon = 1e-15);
        fs.update(&ps, &DVector::from_element(1, 2.0), false).unwrap();
        assert_relative_eq!(fs.mean()[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(fs.covariance()[(0, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn zero_innovation_leaves_mean_at_prediction() {
        let model = scalar_model(0.3, 0.7);
        let mut fs = FilterState::new(
            &DVector::from_element(1, 1.2),
            &DMatrix::from_element(1, 1, 0.4),
        )
        .unwrap();
        let ps = fs.predict(&model, &DVector::from_element(1, -0.3)).unwrap();
        let y = ps.y_pred.clone();
        fs.update(&ps, &y, false).unwrap();
        assert_relative_eq!(fs.mean()[0], ps.x_pred[0], epsilon = 1e-15);
    }

    fn two_dim_system() -> (crate::models::SystemModel, kalman_oracle::Oracle) {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]);
        let b = DMatrix::from_row_slice(2, 1, &[0.5, 1.0]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.02, 0.03]));
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.05]));
        let model = linear_model(
            "two_dim",
            a.clone(),
            b.clone(),
            c.clone(),
            q.clone(),
            r.clone(),
        )
        .unwrap();
        (model, kalman_oracle::Oracle { a, b, c, q, r })
    }

    #[test]
    fn linear_trajectory_matches_kalman_oracle() {
        let (model, oracle) = two_dim_system();
        let x0 = DVector::from_vec(vec![0.3, -0.2]);
        let p0 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.8]));
        let mut fs = FilterState::new(&x0, &p0).unwrap();
        let (mut ox, mut op) = (x0, p0);

        let mut rng = crate::FidRng::seed_from_u64(42);
        for k in 0..50 {
            let u = if k == 0 {
                None
            } else {
                Some(DVector::from_element(1, (k as f64 * 0.37).sin()))
            };
            let y = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));

            let ps = match &u {
                Some(u) => fs.predict(&model, u).unwrap(),
                None => fs.predict_from_prior(&model).unwrap(),
            };
            let record = fs.update(&ps, &y, false).unwrap();

            let os = oracle.step(&ox, &op, u.as_ref(), &y);
            assert_relative_eq!(fs.mean(), &os.x, epsilon = 1e-10);
            assert_relative_eq!(fs.covariance(), &os.p, epsilon = 1e-10);
            assert_relative_eq!(&record.innovation, &os.e, epsilon = 1e-10);
            assert_relative_eq!(&record.s, &os.s, epsilon = 1e-10);
            assert_eq!(fs.covariance(), &fs.covariance().transpose());
            ox = os.x;
            op = os.p;
        }
    }

    #[test]
    fn joseph_form_agrees_on_linear_systems() {
        let (model, _) = two_dim_system();
        let x0 = DVector::from_vec(vec![0.0, 0.0]);
        let p0 = DMatrix::identity(2, 2);
        let mut plain = FilterState::new(&x0, &p0).unwrap();
        let mut joseph = FilterState::new(&x0, &p0).unwrap();
        let mut rng = crate::FidRng::seed_from_u64(7);
        for k in 0..30 {
            let u = DVector::from_element(1, (k as f64 * 0.21).cos());
            let y = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let ps_p = plain.predict(&model, &u).unwrap();
            plain.update(&ps_p, &y, false).unwrap();
            let ps_j = joseph.predict(&model, &u).unwrap();
            joseph.update(&ps_j, &y, true).unwrap();
        }
        assert_relative_eq!(plain.mean(), joseph.mean(), epsilon = 1e-10);
        assert_relative_eq!(plain.covariance(), joseph.covariance(), epsilon = 1e-10);
    }

    #[test]
    fn matched_filter_innovations_are_white() {
        // Simulate the true scalar system and filter it with the matched
        // model; the innovation statistic should average n_y and show no
        // lag-1 correlation.
        let model = linear_model(
            "white",
            DMatrix::from_element(1, 1, 0.9),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.02),
            DMatrix::from_element(1, 1, 0.1),
        )
        .unwrap();
        let mut rng = crate::FidRng::seed_from_u64(2024);
        let mut x_true = DVector::from_element(1, 0.0);
        let mut fs = FilterState::new(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 0.3),
        )
        .unwrap();

        let steps = 10_000;
        let mut stats = Vec::with_capacity(steps);
        let mut normalized = Vec::with_capacity(steps);
        for k in 0..steps {
            let u = DVector::from_element(1, (k as f64 * 0.05).sin());
            x_true = model.step_dynamics(&x_true, &u, &mut rng).unwrap();
            let y = model.measure(&x_true, &mut rng).unwrap();
            let ps = fs.predict(&model, &u).unwrap();
            let record = fs.update(&ps, &y, false).unwrap();
            stats.push(record.stat);
            normalized.push(record.innovation[0] / record.s[(0, 0)].sqrt());
        }
        // Discard the prior transient before testing moments.
        let stats = &stats[100..];
        let normalized = &normalized[100..];
        let mean = stats.iter().sum::<f64>() / stats.len() as f64;
        assert!(
            (mean - 1.0).abs() < 0.05,
            "innovation statistic mean {mean} strays from n_y = 1"
        );
        let n = normalized.len();
        let mu = normalized.iter().sum::<f64>() / n as f64;
        let var = normalized.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
        let lag1 = normalized
            .windows(2)
            .map(|w| (w[0] - mu) * (w[1] - mu))
            .sum::<f64>()
            / ((n - 1) as f64 * var);
        assert!(lag1.abs() < 0.05, "lag-1 autocorrelation {lag1} too large");
        assert!(!fs.check_divergence(stats, &FilterConfig::default()));
    }

    #[test]
    fn example1_filters_are_indistinguishable_without_second_input() {
        // With the second input held at zero the two hypotheses predict the
        // same measurements with the same spread, step after step.
        let cfg = ScenarioConfig::default_for(ScenarioKind::Example1);
        let scenario = build_scenario(ScenarioKind::Example1, &cfg).unwrap();
        let mut bank = FilterBank::new(
            scenario.hypotheses(),
            scenario.x0_mean(),
            scenario.x0_cov(),
            FilterConfig::default(),
        )
        .unwrap();
        let mut rng = crate::FidRng::seed_from_u64(11);
        let truth = scenario.truth().model.clone();
        let mut x = scenario.draw_x0(&mut rng);
        let u = DVector::from_vec(vec![1.0, 0.0]);
        for k in 0..40 {
            let (uk, y) = if k == 0 {
                (None, truth.measure(&x, &mut rng).unwrap())
            } else {
                x = truth.step_dynamics(&x, &u, &mut rng).unwrap();
                (Some(&u), truth.measure(&x, &mut rng).unwrap())
            };
            let records = bank.step(scenario.hypotheses(), uk, &y);
            let a = records[0].as_ref().unwrap();
            let b = records[1].as_ref().unwrap();
            assert_relative_eq!(&a.y_pred, &b.y_pred, epsilon = 1e-13);
            assert_relative_eq!(&a.s, &b.s, epsilon = 1e-13);
        }
    }

    #[test]
    fn innovation_stat_trivial_and_oracle_values() {
        let four = innovation_stat(
            &DVector::from_element(1, 2.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert_relative_eq!(four, 4.0, epsilon = 1e-15);
        let two = innovation_stat(
            &DVector::from_vec(vec![1.0, 1.0]),
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        assert_relative_eq!(two, 2.0, epsilon = 1e-15);

        let mut rng = crate::FidRng::seed_from_u64(3);
        for _ in 0..20 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let s = &a * a.transpose() + DMatrix::identity(3, 3) * 3.0;
            let e = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let direct = (s.clone().try_inverse().unwrap() * &e).dot(&e);
            let solved = innovation_stat(&e, &s).unwrap();
            assert_relative_eq!(solved, direct, max_relative = 1e-10);
        }
    }

    #[test]
    fn divergence_detection_is_sticky() {
        let config = FilterConfig::default();
        let mut fs = FilterState::new(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!(!fs.check_divergence(&[1.0, 2.0], &config));
        // Running-mean cap.
        assert!(fs.check_divergence(&[2e3], &config));
        // Sticky even with benign statistics afterward.
        assert!(fs.check_divergence(&[0.5], &config));
        let model = scalar_model(1.0, 1.0);
        assert!(matches!(
            fs.predict(&model, &DVector::zeros(1)),
            Err(FidError::Diverged(_))
        ));
    }

    #[test]
    fn trace_cap_and_nonfinite_state_diverge() {
        let mut fs = FilterState::new(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 5.0),
        )
        .unwrap();
        let tight = FilterConfig {
            trace_cap: 1.0,
            ..FilterConfig::default()
        };
        assert!(fs.check_divergence(&[], &tight));

        let mut nan = FilterState::new(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        nan.x[0] = f64::NAN;
        assert!(nan.check_divergence(&[], &FilterConfig::default()));
    }

    #[test]
    fn bank_is_deterministic_and_rejects_mismatched_prior() {
        let cfg = ScenarioConfig::default_for(ScenarioKind::TwoTank);
        let scenario = build_scenario(ScenarioKind::TwoTank, &cfg).unwrap();
        let mk = || {
            FilterBank::new(
                scenario.hypotheses(),
                scenario.x0_mean(),
                scenario.x0_cov(),
                FilterConfig::default(),
            )
            .unwrap()
        };
        let mut bank_a = mk();
        let mut bank_b = mk();
        let u = DVector::from_element(1, 0.3);
        let mut rng = crate::FidRng::seed_from_u64(5);
        for k in 0..10 {
            let y = DVector::from_fn(2, |i, _| {
                [1.7, 1.0][i] + 0.01 * rng.random_range(-1.0..1.0)
            });
            let uk = if k == 0 { None } else { Some(&u) };
            let ra = bank_a.step(scenario.hypotheses(), uk, &y);
            let rb = bank_b.step(scenario.hypotheses(), uk, &y);
            for (a, b) in ra.iter().zip(rb.iter()) {
                let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
                assert_eq!(a.stat, b.stat);
                assert_eq!(a.loglik, b.loglik);
            }
        }
        for (fa, fb) in bank_a.filters().iter().zip(bank_b.filters()) {
            assert_eq!(fa.mean(), fb.mean());
            assert_eq!(fa.covariance(), fb.covariance());
        }

        let bad = FilterBank::new(
            scenario.hypotheses(),
            &DVector::zeros(3),
            &DMatrix::identity(3, 3),
            FilterConfig::default(),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn update_rejects_bad_measurements() {
        let model = scalar_model(1.0, 1.0);
        let mut fs = FilterState::new(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let ps = fs.predict(&model, &DVector::zeros(1)).unwrap();
        assert!(fs.update(&ps, &DVector::zeros(2), false).is_err());
        assert!(fs
            .update(&ps, &DVector::from_element(1, f64::NAN), false)
            .is_err());
    }
}
