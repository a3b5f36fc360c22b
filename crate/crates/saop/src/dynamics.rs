//! Deterministic continuous-time simulation of closed-loop systems and
//! evaluation of the finite-horizon cost functional.
//!
//! Rollouts use classical fixed-step RK4 and left-endpoint quadrature for the
//! running cost, so a cost evaluation is a pure function of its arguments and
//! bitwise reproducible across runs and thread counts.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SaopError};

/// Cost reported for a rollout whose state left the representable range.
/// A diverging policy sample becomes a very bad candidate instead of a crash.
pub const PENALTY_DIVERGED: f64 = 1e12;

type FieldFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
type JacobianFn =
    Arc<dyn Fn(&[f64], &dyn Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> + Send + Sync>;
type ScalarFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type PredicateFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Continuous-time control system `x' = f(x, u)` with box input constraints.
#[derive(Clone)]
pub struct SystemModel {
    pub state_dim: usize,
    pub input_dim: usize,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    field: FieldFn,
    jacobian: Option<JacobianFn>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("input_lower", &self.input_lower)
            .field("input_upper", &self.input_upper)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        state_dim: usize,
        input_dim: usize,
        input_lower: Vec<f64>,
        input_upper: Vec<f64>,
        field: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if state_dim == 0 || input_dim == 0 {
            return Err(SaopError::InvalidParameter(
                "state_dim and input_dim must be positive".into(),
            ));
        }
        if input_lower.len() != input_dim || input_upper.len() != input_dim {
            return Err(SaopError::DimensionMismatch(format!(
                "input bounds must have {input_dim} entries"
            )));
        }
        for (i, (lo, hi)) in input_lower.iter().zip(&input_upper).enumerate() {
            if lo > hi {
                return Err(SaopError::InvalidParameter(format!(
                    "input_lower[{i}] = {lo} exceeds input_upper[{i}] = {hi}"
                )));
            }
        }
        Ok(Self {
            state_dim,
            input_dim,
            input_lower,
            input_upper,
            field: Arc::new(field),
            jacobian: None,
        })
    }

    /// Attach an analytic closed-loop Jacobian `d/dx f(x, u(x))`. The closure
    /// receives the state and the closed-loop policy; without it the
    /// Jacobian falls back to central finite differences.
    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&[f64], &dyn Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        (self.field)(x, u)
    }

    pub fn analytic_jacobian(
        &self,
        x: &[f64],
        policy: &dyn Fn(&[f64]) -> Vec<f64>,
    ) -> Option<DMatrix<f64>> {
        self.jacobian.as_ref().map(|j| j(x, policy))
    }
}

/// Finite-horizon cost `J = integral of running + terminal`.
#[derive(Clone)]
pub struct CostFunctional {
    running: ScalarFn,
    terminal: ScalarFn,
    pub horizon: f64,
    early_stop: Option<PredicateFn>,
}

impl CostFunctional {
    pub fn new(
        running: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        horizon: f64,
    ) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(SaopError::InvalidParameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self {
            running: Arc::new(running),
            terminal: Arc::new(terminal),
            horizon,
            early_stop: None,
        })
    }

    /// Goal-reached predicate; when it fires the rollout halts and the
    /// terminal cost is charged at the stopping state.
    pub fn with_early_stop(
        mut self,
        predicate: impl Fn(&[f64]) -> bool + Send + Sync + 'static,
    ) -> Self {
        self.early_stop = Some(Arc::new(predicate));
        self
    }

    pub fn running(&self, x: &[f64], u: &[f64]) -> f64 {
        (self.running)(x, u)
    }

    pub fn terminal(&self, x: &[f64], u: &[f64]) -> f64 {
        (self.terminal)(x, u)
    }

    pub fn early_stop_fires(&self, x: &[f64]) -> bool {
        self.early_stop.as_ref().is_some_and(|p| p(x))
    }

    pub fn has_early_stop(&self) -> bool {
        self.early_stop.is_some()
    }
}

/// A rollout on a uniform time grid. `inputs` carries one row per grid point;
/// the final row is the policy evaluated at the final state (it is charged by
/// the terminal cost but never integrated), so CSV export has an input column
/// for every row.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub truncated_at: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one point")
    }

    /// CSV with header `t,x1..xn,u1..um`, one row per grid point. Floats are
    /// formatted with Rust's shortest round-trip representation.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.inputs.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        for j in 1..=m {
            out.push_str(&format!(",u{j}"));
        }
        out.push('\n');
        for k in 0..self.times.len() {
            out.push_str(&format!("{}", self.times[k]));
            for v in &self.states[k] {
                out.push_str(&format!(",{v}"));
            }
            for v in &self.inputs[k] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Bounded exogenous disturbance `w(t)` with `||w(t)|| <= bound`.
#[derive(Clone)]
pub struct Disturbance {
    pub bound: f64,
    realization: Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>,
}

impl Disturbance {
    pub fn new(
        bound: f64,
        realization: impl Fn(f64) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if bound < 0.0 {
            return Err(SaopError::InvalidParameter(format!(
                "disturbance bound must be nonnegative, got {bound}"
            )));
        }
        Ok(Self {
            bound,
            realization: Arc::new(realization),
        })
    }

    /// Piecewise-constant realization: a fresh vector drawn uniformly from the
    /// ball of radius `bound` every `hold_dt` seconds, reproducible from the
    /// seed. Evaluation outside `[0, horizon]` repeats the nearest segment.
    pub fn piecewise_constant(
        dim: usize,
        bound: f64,
        hold_dt: f64,
        horizon: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(hold_dt > 0.0) || !(horizon > 0.0) {
            return Err(SaopError::InvalidParameter(
                "hold_dt and horizon must be positive".into(),
            ));
        }
        let segments = (horizon / hold_dt).ceil() as usize + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(segments);
        for _ in 0..segments {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            // uniform in the ball: direction times bound * u^(1/dim)
            let u: f64 = rng.random();
            let scale = if norm > 0.0 {
                bound * u.powf(1.0 / dim as f64) / norm
            } else {
                0.0
            };
            v.iter_mut().for_each(|x| *x *= scale);
            values.push(v);
        }
        let last = segments - 1;
        Self::new(bound, move |t| {
            let idx = ((t / hold_dt).floor().max(0.0) as usize).min(last);
            values[idx].clone()
        })
    }

    /// Evaluate the realization, asserting the sup-norm bound.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let w = (self.realization)(t);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(
            norm <= self.bound * (1.0 + 1e-9) + 1e-12,
            "disturbance realization violates its bound at t = {t}: ||w|| = {norm} > {}",
            self.bound
        );
        w
    }
}

fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// One classical RK4 step of `x' = f(x, policy(x)) + w(t)`. The policy is
/// re-evaluated at every internal stage.
pub fn rk4_step(
    model: &SystemModel,
    policy: &dyn Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    dt: f64,
    disturbance: Option<&Disturbance>,
    t: f64,
) -> Result<Vec<f64>> {
    debug_assert!(dt > 0.0);
    let n = x.len();
    let deriv = |y: &[f64], stage_t: f64| -> Vec<f64> {
        let u = policy(y);
        let mut dx = model.eval(y, &u);
        if let Some(d) = disturbance {
            let w = d.eval(stage_t);
            for (dxi, wi) in dx.iter_mut().zip(&w) {
                *dxi += wi;
            }
        }
        dx
    };

    let k1 = deriv(x, t);
    let mut x2 = x.to_vec();
    for i in 0..n {
        x2[i] += 0.5 * dt * k1[i];
    }
    let k2 = deriv(&x2, t + 0.5 * dt);
    let mut x3 = x.to_vec();
    for i in 0..n {
        x3[i] += 0.5 * dt * k2[i];
    }
    let k3 = deriv(&x3, t + 0.5 * dt);
    let mut x4 = x.to_vec();
    for i in 0..n {
        x4[i] += dt * k3[i];
    }
    let k4 = deriv(&x4, t + dt);

    let mut next = x.to_vec();
    for i in 0..n {
        next[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    if !all_finite(&next) {
        return Err(SaopError::IntegrationDiverged { t: t + dt });
    }
    Ok(next)
}

/// Roll out the closed loop from `x0` over the cost horizon (or until the
/// early-stop predicate fires) and accumulate the cost functional with
/// left-endpoint quadrature:
/// `J = sum_k running(x_k, u_k) * dt + terminal(x_end, u_end)`.
pub fn simulate(
    model: &SystemModel,
    policy: &dyn Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    cost: &CostFunctional,
    dt: f64,
    disturbance: Option<&Disturbance>,
) -> Result<(Trajectory, f64)> {
    if !(dt > 0.0) {
        return Err(SaopError::InvalidParameter(format!(
            "dt must be positive, got {dt}"
        )));
    }
    if x0.len() != model.state_dim {
        return Err(SaopError::DimensionMismatch(format!(
            "x0 has {} entries, model expects {}",
            x0.len(),
            model.state_dim
        )));
    }
    let steps = (cost.horizon / dt).round().max(1.0) as usize;

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut truncated_at = None;

    let mut x = x0.to_vec();
    let mut running_sum = 0.0;
    for k in 0..=steps {
        let t = k as f64 * dt;
        let u = policy(&x);
        times.push(t);
        states.push(x.clone());
        inputs.push(u.clone());

        if cost.early_stop_fires(&x) {
            truncated_at = Some(k);
            break;
        }
        if k == steps {
            break;
        }

        let ell = cost.running(&x, &u);
        if !ell.is_finite() {
            return Err(SaopError::IntegrationDiverged { t });
        }
        running_sum += ell * dt;
        x = rk4_step(model, policy, &x, dt, disturbance, t)?;
    }

    let x_end = states.last().expect("at least the initial state");
    let u_end = inputs.last().expect("at least the initial input");
    let j = running_sum + cost.terminal(x_end, u_end);
    if !j.is_finite() {
        return Err(SaopError::IntegrationDiverged {
            t: *times.last().unwrap(),
        });
    }
    Ok((
        Trajectory {
            times,
            states,
            inputs,
            truncated_at,
        },
        j,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_decay() -> SystemModel {
        SystemModel::new(1, 1, vec![-1.0], vec![1.0], |x, _| vec![-x[0]]).unwrap()
    }

    fn zero_policy(m: usize) -> impl Fn(&[f64]) -> Vec<f64> {
        move |_: &[f64]| vec![0.0; m]
    }

    #[test]
    fn rk4_zero_field_keeps_state() {
        let model = SystemModel::new(2, 1, vec![-1.0], vec![1.0], |_, _| vec![0.0, 0.0]).unwrap();
        let x = rk4_step(&model, &zero_policy(1), &[3.0, -4.0], 0.1, None, 0.0).unwrap();
        assert_eq!(x, vec![3.0, -4.0]);
    }

    #[test]
    fn rk4_matches_exponential_series() {
        // x' = -x, one step of h = 0.01 from x = 1:
        // 1 - h + h^2/2 - h^3/6 + h^4/24 = 0.990049834...
        let model = scalar_decay();
        let x = rk4_step(&model, &zero_policy(1), &[1.0], 0.01, None, 0.0).unwrap();
        assert_relative_eq!(x[0], 0.990049834, epsilon = 1e-9);
    }

    #[test]
    fn rk4_integrates_constant_field_linearly() {
        let model = SystemModel::new(1, 1, vec![-1.0], vec![1.0], |_, u| vec![u[0]]).unwrap();
        let policy = |_: &[f64]| vec![1.0f64.clamp(-1.0, 1.0)];
        let x = rk4_step(&model, &policy, &[0.0], 0.5, None, 0.0).unwrap();
        assert_relative_eq!(x[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn rk4_is_fourth_order_on_exponential() {
        let model = scalar_decay();
        let policy = zero_policy(1);
        let err_at = |dt: f64| {
            let mut x = vec![1.0];
            let steps = (1.0 / dt).round() as usize;
            for k in 0..steps {
                x = rk4_step(&model, &policy, &x, dt, None, k as f64 * dt).unwrap();
            }
            (x[0] - (-1.0f64).exp()).abs()
        };
        let e1 = err_at(0.02);
        let e2 = err_at(0.01);
        assert!(e1 / e2 >= 8.0, "halving dt only gained {:.2}x", e1 / e2);
        assert!(err_at(0.01) <= 1e-8);
    }

    #[test]
    fn simulate_terminal_only() {
        let model = SystemModel::new(2, 1, vec![-1.0], vec![1.0], |_, _| vec![0.0, 0.0]).unwrap();
        let cost = CostFunctional::new(|_, _| 0.0, |x, _| x.iter().map(|v| v * v).sum(), 1.0).unwrap();
        let (_, j) = simulate(&model, &zero_policy(1), &[1.0, 0.0], &cost, 0.1, None).unwrap();
        assert_relative_eq!(j, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn simulate_exponential_terminal_cost() {
        let model = scalar_decay();
        let cost = CostFunctional::new(|_, _| 0.0, |x, _| x[0] * x[0], 1.0).unwrap();
        let (_, j) = simulate(&model, &zero_policy(1), &[1.0], &cost, 0.001, None).unwrap();
        assert_relative_eq!(j, (-2.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn simulate_running_cost_left_endpoint() {
        let model = SystemModel::new(1, 1, vec![-1.0], vec![1.0], |_, _| vec![0.0]).unwrap();
        let cost = CostFunctional::new(|_, _| 1.0, |_, _| 0.0, 2.0).unwrap();
        let (traj, j) = simulate(&model, &zero_policy(1), &[0.0], &cost, 0.1, None).unwrap();
        assert!((j - 2.0).abs() <= 0.1);
        assert_eq!(traj.times.len(), 21);
        assert_eq!(traj.states.len(), traj.times.len());
        assert_eq!(traj.inputs.len(), traj.times.len());
    }

    #[test]
    fn simulate_is_deterministic() {
        let model = scalar_decay();
        let cost = CostFunctional::new(|x, _| x[0] * x[0], |x, _| x[0] * x[0], 1.0).unwrap();
        let d = Disturbance::piecewise_constant(1, 0.3, 0.2, 1.0, 7).unwrap();
        let (_, j1) = simulate(&model, &zero_policy(1), &[1.0], &cost, 0.01, Some(&d)).unwrap();
        let (_, j2) = simulate(&model, &zero_policy(1), &[1.0], &cost, 0.01, Some(&d)).unwrap();
        assert_eq!(j1.to_bits(), j2.to_bits());
    }

    #[test]
    fn cost_nondecreasing_in_horizon() {
        let model = scalar_decay();
        let policy = zero_policy(1);
        let mut prev = 0.0;
        for steps in [10, 20, 40, 80] {
            let horizon = steps as f64 * 0.01;
            let cost = CostFunctional::new(|x, _| x[0] * x[0], |_, _| 0.0, horizon).unwrap();
            let (_, j) = simulate(&model, &policy, &[1.0], &cost, 0.01, None).unwrap();
            assert!(j >= prev);
            prev = j;
        }
    }

    #[test]
    fn divergence_yields_error_with_time() {
        // x' = x^2 from x = 10 escapes in finite time.
        let model = SystemModel::new(1, 1, vec![-1.0], vec![1.0], |x, _| vec![x[0] * x[0]]).unwrap();
        let cost = CostFunctional::new(|_, _| 0.0, |_, _| 0.0, 10.0).unwrap();
        let err = simulate(&model, &zero_policy(1), &[10.0], &cost, 0.1, None).unwrap_err();
        match err {
            SaopError::IntegrationDiverged { t } => assert!(t > 0.0 && t < 10.0),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn early_stop_truncates_and_charges_terminal() {
        let model = SystemModel::new(1, 1, vec![-1.0], vec![1.0], |_, u| vec![u[0]]).unwrap();
        let policy = |_: &[f64]| vec![1.0];
        let cost = CostFunctional::new(|_, _| 1.0, |x, _| 10.0 * x[0], 10.0)
            .unwrap()
            .with_early_stop(|x| x[0] >= 0.5);
        let (traj, j) = simulate(&model, &policy, &[0.0], &cost, 0.1, None).unwrap();
        let stop = traj.truncated_at.expect("must truncate");
        assert_eq!(stop, 5);
        // 5 steps of running cost 1*0.1 plus terminal 10*0.5
        assert_relative_eq!(j, 0.5 + 5.0, epsilon = 1e-9);
    }

    #[test]
    fn disturbance_bound_is_asserted() {
        let d = Disturbance::new(0.5, |_| vec![1.0, 0.0]).unwrap();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| d.eval(0.0)));
        assert!(res.is_err());
    }

    #[test]
    fn piecewise_disturbance_respects_bound() {
        let d = Disturbance::piecewise_constant(3, 0.5, 0.1, 2.0, 42).unwrap();
        for k in 0..200 {
            let w = d.eval(k as f64 * 0.01);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn trajectory_csv_round_trips_floats() {
        let traj = Trajectory {
            times: vec![0.0, 0.1],
            states: vec![vec![1.0 / 3.0, 2.0], vec![0.5, -1.25]],
            inputs: vec![vec![0.1], vec![0.2]],
            truncated_at: None,
        };
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,x2,u1");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[1].parse::<f64>().unwrap(), 1.0 / 3.0);
    }
}
