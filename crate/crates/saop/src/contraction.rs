//! Contraction-based robustness checks: closed-loop Jacobian evaluation,
//! entrywise tube verification along nominal trajectories, and the
//! disturbance bounds that a verified tube guarantees.
//!
//! A weight vector passes when, at sampled times along its nominal
//! trajectory, every entry of `G = J' M + M J` (with `J` the closed-loop
//! state Jacobian) stays at or below `-beta * m_ij` over a metric ball of
//! radius `ell` around the nominal state. The ball maximum is estimated from
//! a fixed, deterministic, boundary-biased point set, so a verdict is
//! reproducible and a passing weight vector can be rejected only
//! conservatively.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{policy_eval, BasisSet};
use crate::dynamics::{SystemModel, Trajectory};
use crate::error::{Result, SaopError};

pub const DEFAULT_BALL_SAMPLES: usize = 64;
pub const DEFAULT_CHECK_STRIDE: usize = 10;

/// Constant-metric tube specification `(M, beta, ell, rho_max)`.
#[derive(Clone, Debug)]
pub struct ContractionSpec {
    pub metric: DMatrix<f64>,
    pub beta: f64,
    pub ell: f64,
    pub rho_max: f64,
    /// Ball points per checkpoint (the center is always added).
    pub ball_samples: usize,
    /// Verify every `check_stride`-th grid point.
    pub check_stride: usize,
}

impl ContractionSpec {
    pub fn new(metric: DMatrix<f64>, beta: f64, ell: f64, rho_max: f64) -> Result<Self> {
        if metric.nrows() != metric.ncols() {
            return Err(SaopError::DimensionMismatch("metric must be square".into()));
        }
        let scale = metric.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        for i in 0..metric.nrows() {
            for j in (i + 1)..metric.ncols() {
                if (metric[(i, j)] - metric[(j, i)]).abs() > 1e-12 * scale {
                    return Err(SaopError::InvalidParameter("metric must be symmetric".into()));
                }
            }
        }
        if metric.clone().cholesky().is_none() {
            return Err(SaopError::InvalidParameter(
                "metric must be positive definite".into(),
            ));
        }
        if !(beta > 0.0) || !(ell > 0.0) {
            return Err(SaopError::InvalidParameter(
                "beta and ell must be positive".into(),
            ));
        }
        if !(rho_max >= 0.0) {
            return Err(SaopError::InvalidParameter(
                "rho_max must be nonnegative".into(),
            ));
        }
        Ok(Self {
            metric,
            beta,
            ell,
            rho_max,
            ball_samples: DEFAULT_BALL_SAMPLES,
            check_stride: DEFAULT_CHECK_STRIDE,
        })
    }

    pub fn identity(n: usize, beta: f64, ell: f64, rho_max: f64) -> Result<Self> {
        Self::new(DMatrix::identity(n, n), beta, ell, rho_max)
    }

    pub fn with_ball_samples(mut self, ball_samples: usize) -> Self {
        self.ball_samples = ball_samples;
        self
    }

    pub fn with_check_stride(mut self, check_stride: usize) -> Self {
        self.check_stride = check_stride.max(1);
        self
    }

    /// Asymptotic bound `2 * ell * rho_max / beta` on the squared M-norm
    /// deviation from the nominal trajectory.
    pub fn ultimate_bound(&self) -> f64 {
        2.0 * self.ell * self.rho_max / self.beta
    }

    /// Transient bound `(2 ell rho_max / beta)(1 - exp(-beta t))` for matched
    /// initial conditions.
    pub fn bound_envelope(&self, t: f64) -> f64 {
        debug_assert!(t >= 0.0);
        self.ultimate_bound() * (1.0 - (-self.beta * t).exp())
    }
}

/// Central finite-difference Jacobian of `f: R^n -> R^out`, with step
/// `h_i = 1e-5 * (1 + |x_i|)` per column.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], out_dim: usize) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(out_dim, n);
    let mut x_hi = x.to_vec();
    let mut x_lo = x.to_vec();
    for i in 0..n {
        let h = 1e-5 * (1.0 + x[i].abs());
        x_hi[i] = x[i] + h;
        x_lo[i] = x[i] - h;
        let f_hi = f(&x_hi);
        let f_lo = f(&x_lo);
        for r in 0..out_dim {
            jac[(r, i)] = (f_hi[r] - f_lo[r]) / (2.0 * h);
        }
        x_hi[i] = x[i];
        x_lo[i] = x[i];
    }
    jac
}

/// Jacobian of the closed loop `x -> f(x, u(x))` where `u` is the saturated
/// basis policy for `w`. Uses the model's analytic Jacobian when present,
/// otherwise central finite differences. Saturated channels contribute zero
/// derivative through the policy either way.
pub fn closed_loop_jacobian(
    model: &SystemModel,
    basis: &BasisSet,
    w: &[f64],
    x: &[f64],
) -> DMatrix<f64> {
    let policy =
        |y: &[f64]| policy_eval(w, basis, y, &model.input_lower, &model.input_upper);
    if let Some(jac) = model.analytic_jacobian(x, &policy) {
        return jac;
    }
    fd_jacobian(|y| model.eval(y, &policy(y)), x, model.state_dim)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TubeViolation {
    pub t: f64,
    pub row: usize,
    pub col: usize,
    /// `-beta * m_ij - max g_ij`; negative means violated.
    pub margin: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CheckpointMargin {
    pub t: f64,
    /// Worst entrywise margin `min_ij (-beta * m_ij - max_ball g_ij)` at this
    /// checkpoint; nonnegative everywhere means the tube check passes.
    pub worst_margin: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TubeReport {
    pub pass: bool,
    pub first_violation: Option<TubeViolation>,
    pub checkpoints: Vec<CheckpointMargin>,
}

impl TubeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Deterministic, boundary-biased point set inside the metric ball
/// `{v : ||v||_M <= ell}`. Directions come from Box-Muller applied to a Weyl
/// (golden-ratio-like) lattice, so the set is low-discrepancy and identical
/// across calls; three of four points sit exactly on the boundary. The zero
/// offset (ball center) is always first.
fn ball_offsets(n: usize, ell: f64, metric: &DMatrix<f64>, count: usize) -> Vec<DVector<f64>> {
    const PRIMES: [f64; 16] = [
        2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0, 41.0, 43.0, 47.0, 53.0,
    ];
    let l_t = metric
        .clone()
        .cholesky()
        .expect("metric validated positive definite")
        .l()
        .transpose();

    let frac = |v: f64| v - v.floor();
    let mut offsets = Vec::with_capacity(count + 1);
    offsets.push(DVector::zeros(n));
    // pairs of uniforms per Box-Muller draw; one extra channel for the radius
    let uniform_dims = n + (n % 2) + 1;
    for k in 0..count {
        let us: Vec<f64> = (0..uniform_dims)
            .map(|j| {
                let alpha = PRIMES[j % PRIMES.len()].sqrt();
                frac((k as f64 + 1.0) * alpha + 0.5 * j as f64)
                    .clamp(1e-12, 1.0 - 1e-12)
            })
            .collect();
        let mut z = Vec::with_capacity(n);
        let mut pair = 0;
        while z.len() < n {
            let u1 = us[2 * pair];
            let u2 = us[2 * pair + 1];
            let r = (-2.0 * u1.ln()).sqrt();
            z.push(r * (2.0 * std::f64::consts::PI * u2).cos());
            if z.len() < n {
                z.push(r * (2.0 * std::f64::consts::PI * u2).sin());
            }
            pair += 1;
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let radius = if k % 4 == 0 {
            ell * us[uniform_dims - 1].powf(1.0 / n as f64)
        } else {
            ell
        };
        let s = DVector::from_iterator(n, z.iter().map(|v| v * radius / norm));
        // ||v||_M = ||L^T v||_2, so v = (L^T)^-1 s lands at M-radius |s|
        let v = l_t
            .solve_upper_triangular(&s)
            .expect("Cholesky factor is invertible");
        offsets.push(v);
    }
    offsets
}

/// Verify the entrywise contraction condition `g_ij <= -beta * m_ij` for
/// `G = J' M + M J` over the metric ball around every `check_stride`-th
/// nominal state (the final state is always included). Never errs: failures
/// are reported, not thrown.
pub fn verify_tube(
    model: &SystemModel,
    basis: &BasisSet,
    w: &[f64],
    nominal: &Trajectory,
    spec: &ContractionSpec,
) -> TubeReport {
    let n = model.state_dim;
    let offsets = ball_offsets(n, spec.ell, &spec.metric, spec.ball_samples);
    let last = nominal.states.len() - 1;
    let mut indices: Vec<usize> = (0..=last).step_by(spec.check_stride.max(1)).collect();
    if *indices.last().unwrap() != last {
        indices.push(last);
    }

    let mut pass = true;
    let mut first_violation = None;
    let mut checkpoints = Vec::with_capacity(indices.len());
    for &idx in &indices {
        let t = nominal.times[idx];
        let x_bar = &nominal.states[idx];
        let mut max_g = DMatrix::from_element(n, n, f64::NEG_INFINITY);
        for offset in &offsets {
            let x: Vec<f64> = x_bar.iter().zip(offset.iter()).map(|(a, b)| a + b).collect();
            let jac = closed_loop_jacobian(model, basis, w, &x);
            let g = jac.transpose() * &spec.metric + &spec.metric * &jac;
            for i in 0..n {
                for j in 0..n {
                    if g[(i, j)] > max_g[(i, j)] {
                        max_g[(i, j)] = g[(i, j)];
                    }
                }
            }
        }
        let mut worst = f64::INFINITY;
        for i in 0..n {
            for j in 0..n {
                let margin = -spec.beta * spec.metric[(i, j)] - max_g[(i, j)];
                if margin < worst {
                    worst = margin;
                }
                if margin < 0.0 && first_violation.is_none() {
                    first_violation = Some(TubeViolation {
                        t,
                        row: i,
                        col: j,
                        margin,
                    });
                }
            }
        }
        if worst < 0.0 {
            pass = false;
        }
        checkpoints.push(CheckpointMargin {
            t,
            worst_margin: worst,
        });
    }
    TubeReport {
        pass,
        first_violation,
        checkpoints,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::make_polynomial;
    use crate::dynamics::{simulate, CostFunctional};
    use approx::assert_relative_eq;

    fn single_constant_basis() -> BasisSet {
        make_polynomial(1, &[vec![]]).unwrap()
    }

    fn straight_line_trajectory(n: usize, points: usize) -> Trajectory {
        Trajectory {
            times: (0..points).map(|k| k as f64 * 0.1).collect(),
            states: (0..points).map(|_| vec![0.0; n]).collect(),
            inputs: (0..points).map(|_| vec![0.0]).collect(),
            truncated_at: None,
        }
    }

    #[test]
    fn jacobian_of_linear_closed_loop() {
        // x' = A x + B u with u = K x below saturation gives A + B K
        let a = [[-1.0, 2.0], [0.5, -3.0]];
        let b = [0.0, 1.0];
        let k_gain = [0.7, -1.2];
        let model = SystemModel::new(2, 1, vec![-100.0], vec![100.0], move |x, u| {
            vec![
                a[0][0] * x[0] + a[0][1] * x[1] + b[0] * u[0],
                a[1][0] * x[0] + a[1][1] * x[1] + b[1] * u[0],
            ]
        })
        .unwrap();
        let basis = make_polynomial(2, &[vec![1, 0], vec![0, 1]]).unwrap();
        let jac = closed_loop_jacobian(&model, &basis, &k_gain, &[0.3, -0.4]);
        for i in 0..2 {
            for j in 0..2 {
                let expected = a[i][j] + b[i] * k_gain[j];
                assert_relative_eq!(jac[(i, j)], expected, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn zero_field_has_zero_jacobian() {
        let model =
            SystemModel::new(2, 1, vec![-1.0], vec![1.0], |_, _| vec![0.0, 0.0]).unwrap();
        let basis = make_polynomial(2, &[vec![1, 0]]).unwrap();
        let jac = closed_loop_jacobian(&model, &basis, &[0.0], &[1.0, 2.0]);
        for v in jac.iter() {
            assert!(v.abs() <= 1e-9);
        }
    }

    #[test]
    fn contracting_scalar_system_passes() {
        let model = SystemModel::new(1, 1, vec![-1.0], vec![1.0], |x, _| vec![-x[0]]).unwrap();
        let basis = single_constant_basis();
        let spec = ContractionSpec::identity(1, 0.5, 1.0, 0.0).unwrap();
        let nominal = straight_line_trajectory(1, 30);
        let report = verify_tube(&model, &basis, &[0.0], &nominal, &spec);
        assert!(report.pass, "{report:?}");
        assert!(report.first_violation.is_none());
    }

    #[test]
    fn expanding_scalar_system_fails_at_first_check() {
        let model = SystemModel::new(1, 1, vec![-1.0], vec![1.0], |x, _| vec![x[0]]).unwrap();
        let basis = single_constant_basis();
        let spec = ContractionSpec::identity(1, 0.5, 1.0, 0.0).unwrap();
        let nominal = straight_line_trajectory(1, 30);
        let report = verify_tube(&model, &basis, &[0.0], &nominal, &spec);
        assert!(!report.pass);
        let v = report.first_violation.expect("violation reported");
        assert_eq!(v.t, 0.0);
        // g11 = 2 against threshold -0.5: margin = -0.5 - 2 = -2.5
        assert_relative_eq!(v.margin, -2.5, epsilon = 1e-6);
    }

    #[test]
    fn ultimate_bound_values() {
        let spec = ContractionSpec::identity(2, 2.0, 1.0, 0.5).unwrap();
        assert_eq!(spec.ultimate_bound(), 0.5);
        let no_dist = ContractionSpec::identity(2, 2.0, 1.0, 0.0).unwrap();
        assert_eq!(no_dist.ultimate_bound(), 0.0);
        let other = ContractionSpec::identity(2, 1.5, 3.0, 1.0).unwrap();
        assert_relative_eq!(other.ultimate_bound(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn envelope_limits() {
        let spec = ContractionSpec::identity(2, 2.0, 1.0, 0.5).unwrap();
        assert_eq!(spec.bound_envelope(0.0), 0.0);
        assert_relative_eq!(spec.bound_envelope(1e6), spec.ultimate_bound(), epsilon = 1e-12);
        assert_relative_eq!(
            spec.bound_envelope(1.0),
            0.5 * (1.0 - (-2.0f64).exp()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ball_offsets_stay_in_metric_ball() {
        let metric = DMatrix::from_vec(2, 2, vec![2.0, 0.3, 0.3, 1.0]);
        let ell = 0.7;
        let offsets = ball_offsets(2, ell, &metric, 64);
        assert_eq!(offsets.len(), 65);
        assert!(offsets[0].iter().all(|v| *v == 0.0));
        let mut boundary = 0;
        for v in &offsets {
            let m_norm = (v.transpose() * &metric * v)[(0, 0)].sqrt();
            assert!(m_norm <= ell * (1.0 + 1e-9));
            if (m_norm - ell).abs() <= 1e-9 {
                boundary += 1;
            }
        }
        assert!(boundary >= 32, "point set should be boundary-biased");
    }

    #[test]
    fn ball_offsets_are_deterministic() {
        let metric = DMatrix::identity(3, 3);
        let a = ball_offsets(3, 1.0, &metric, 16);
        let b = ball_offsets(3, 1.0, &metric, 16);
        assert_eq!(a, b);
    }

    #[test]
    fn beta_monotonicity_with_identity_metric() {
        // passing at beta implies passing at any smaller beta (same points)
        let model = SystemModel::new(2, 1, vec![-5.0], vec![5.0], |x, _| {
            vec![-2.0 * x[0] + 0.2 * x[1] * x[1], -3.0 * x[1]]
        })
        .unwrap();
        let basis = make_polynomial(2, &[vec![]]).unwrap();
        let nominal = straight_line_trajectory(2, 20);
        let strong = ContractionSpec::identity(2, 2.0, 0.5, 0.0).unwrap();
        let weak = ContractionSpec::identity(2, 0.5, 0.5, 0.0).unwrap();
        let strong_report = verify_tube(&model, &basis, &[0.0], &nominal, &strong);
        if strong_report.pass {
            assert!(verify_tube(&model, &basis, &[0.0], &nominal, &weak).pass);
        }
    }

    #[test]
    fn verified_tube_bounds_disturbed_rollouts() {
        // empirical envelope check on a contracting scalar system
        let model = SystemModel::new(1, 1, vec![-1.0], vec![1.0], |x, _| vec![-2.0 * x[0]]).unwrap();
        let basis = single_constant_basis();
        let spec = ContractionSpec::identity(1, 0.5, 2.0, 0.4).unwrap();
        let cost = CostFunctional::new(|_, _| 0.0, |_, _| 0.0, 5.0).unwrap();
        let policy = |_: &[f64]| vec![0.0];
        let (nominal, _) = simulate(&model, &policy, &[1.0], &cost, 0.01, None).unwrap();
        assert!(verify_tube(&model, &basis, &[0.0], &nominal, &spec).pass);

        for seed in 0..5 {
            let d = crate::dynamics::Disturbance::piecewise_constant(1, 0.4, 0.05, 5.0, seed)
                .unwrap();
            let (disturbed, _) = simulate(&model, &policy, &[1.0], &cost, 0.01, Some(&d)).unwrap();
            for k in 0..nominal.times.len() {
                let dev = disturbed.states[k][0] - nominal.states[k][0];
                let v = dev * dev;
                let envelope = spec.bound_envelope(nominal.times[k]);
                assert!(
                    v <= envelope * 1.05 + 1e-12,
                    "t = {}: deviation {v} exceeds envelope {envelope}",
                    nominal.times[k]
                );
            }
        }
    }
}
