//! Benchmark planning problems: a linear system with a non-quadratic cost, a
//! Dubins car reaching a goal around an obstacle, and a simulation-free
//! quadratic objective that serves as a correctness oracle for the search.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::basis::{make_polynomial, make_rbf_on, policy_eval, BasisSet};
use crate::bounds::BoxBounds;
use crate::contraction::{fd_jacobian, ContractionSpec};
use crate::dynamics::{simulate, CostFunctional, Disturbance, SystemModel, Trajectory, PENALTY_DIVERGED};
use crate::error::{Result, SaopError};

type StaticObjective = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type CollisionFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Everything the search loop needs to score a weight vector.
#[derive(Clone)]
pub struct PlanningProblem {
    pub name: String,
    pub model: SystemModel,
    pub cost: CostFunctional,
    pub basis: BasisSet,
    pub x0: Vec<f64>,
    pub dt: f64,
    pub weight_support: BoxBounds,
    pub contraction: Option<ContractionSpec>,
    pub disturbance_bound: Option<f64>,
    /// State predicate charged once per rollout with `collision_penalty`.
    pub collision: Option<CollisionFn>,
    pub collision_penalty: f64,
    /// Goal-region predicate for problems whose rollout runs the full
    /// horizon; a trajectory "reaches the goal" if any grid state satisfies
    /// it. Problems that halt at the goal use the cost's early stop instead.
    pub goal_predicate: Option<CollisionFn>,
    /// When present the cost is `static_objective(w)` and no simulation runs.
    pub static_objective: Option<StaticObjective>,
}

impl PlanningProblem {
    /// Dimension of the sampled weight space.
    pub fn weight_dim(&self) -> usize {
        self.weight_support.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.static_objective.is_some() {
            return Ok(());
        }
        let expected = self.model.input_dim * self.basis.len();
        if self.weight_dim() != expected {
            return Err(SaopError::DimensionMismatch(format!(
                "weight support has dimension {}, expected channels * N = {expected}",
                self.weight_dim()
            )));
        }
        if self.x0.len() != self.model.state_dim {
            return Err(SaopError::DimensionMismatch(format!(
                "x0 has {} entries, model expects {}",
                self.x0.len(),
                self.model.state_dim
            )));
        }
        if self.basis.state_dim != self.model.state_dim {
            return Err(SaopError::DimensionMismatch(
                "basis and model disagree on the state dimension".into(),
            ));
        }
        Ok(())
    }

    /// The saturated feedback policy induced by `w`.
    pub fn policy<'a>(&'a self, w: &'a [f64]) -> impl Fn(&[f64]) -> Vec<f64> + 'a {
        move |x: &[f64]| {
            policy_eval(w, &self.basis, x, &self.model.input_lower, &self.model.input_upper)
        }
    }

    /// Roll out the closed loop under `w` (errors propagate).
    pub fn rollout(
        &self,
        w: &[f64],
        disturbance: Option<&Disturbance>,
    ) -> Result<(Trajectory, f64)> {
        let policy = self.policy(w);
        simulate(&self.model, &policy, &self.x0, &self.cost, self.dt, disturbance)
    }

    /// Total cost of `w`: the static objective when present, otherwise the
    /// simulated cost plus the collision penalty, with diverged rollouts
    /// mapped to [`PENALTY_DIVERGED`].
    pub fn evaluate(&self, w: &[f64]) -> f64 {
        if let Some(obj) = &self.static_objective {
            return obj(w);
        }
        match self.rollout(w, None) {
            Ok((traj, j)) => {
                if self.trajectory_collides(&traj) {
                    j + self.collision_penalty
                } else {
                    j
                }
            }
            Err(_) => PENALTY_DIVERGED,
        }
    }

    pub fn trajectory_collides(&self, traj: &Trajectory) -> bool {
        match &self.collision {
            Some(pred) => traj.states.iter().any(|x| pred(x)),
            None => false,
        }
    }

    /// True when the rollout entered the goal region: any grid state for
    /// problems with a goal predicate, otherwise the early-stop machinery.
    pub fn goal_reached(&self, traj: &Trajectory) -> bool {
        if let Some(pred) = &self.goal_predicate {
            return traj.states.iter().any(|x| pred(x));
        }
        traj.truncated_at.is_some() || self.cost.early_stop_fires(traj.final_state())
    }
}

/// Options for [`lti_nonquadratic_with`].
#[derive(Clone, Debug)]
pub struct LtiOptions {
    pub horizon: f64,
    pub dt: f64,
    /// Keep only the linear terms `[x1, x2]` (feedback-gain ablation).
    pub linear_basis_only: bool,
    pub weight_bound: f64,
}

impl Default for LtiOptions {
    fn default() -> Self {
        Self {
            horizon: 10.0,
            dt: 0.01,
            linear_basis_only: false,
            weight_bound: 10.0,
        }
    }
}

/// Two-state linear system with a sixth-order running cost. The optimal
/// feedback is nonlinear, so the cubic polynomial basis earns its keep; the
/// closed-loop Jacobian is supplied analytically as `A + B * d(policy)/dx`.
pub fn lti_nonquadratic() -> PlanningProblem {
    lti_nonquadratic_with(&LtiOptions::default())
}

pub fn lti_nonquadratic_with(opts: &LtiOptions) -> PlanningProblem {
    let a = [[-1.0, 1.0], [0.0, 0.0]];
    let b = [0.0, 1.0];
    let model = SystemModel::new(
        2,
        1,
        vec![f64::NEG_INFINITY],
        vec![f64::INFINITY],
        move |x, u| {
            vec![
                a[0][0] * x[0] + a[0][1] * x[1] + b[0] * u[0],
                a[1][0] * x[0] + a[1][1] * x[1] + b[1] * u[0],
            ]
        },
    )
    .expect("static setup")
    .with_jacobian(move |x, policy| {
        let dpi = fd_jacobian(|y| policy(y), x, 1);
        let mut jac = DMatrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                jac[(i, j)] = a[i][j] + b[i] * dpi[(0, j)];
            }
        }
        jac
    });

    let running = |x: &[f64], u: &[f64]| {
        let s: f64 = x.iter().map(|v| v * v).sum();
        let uu: f64 = u.iter().map(|v| v * v).sum();
        s + uu + 0.5 * s * s + 0.8 * s * s * s
    };
    let terminal = |x: &[f64], _: &[f64]| x.iter().map(|v| v * v).sum();
    let cost = CostFunctional::new(running, terminal, opts.horizon).expect("static setup");

    let terms: Vec<Vec<u32>> = if opts.linear_basis_only {
        vec![vec![1, 0], vec![0, 1]]
    } else {
        vec![vec![1, 0], vec![0, 1], vec![2, 0], vec![0, 2], vec![3, 0], vec![0, 3]]
    };
    let basis = make_polynomial(2, &terms).expect("static setup");
    let dim = basis.len();

    PlanningProblem {
        name: if opts.linear_basis_only {
            "lti_nonquadratic[linear]".into()
        } else {
            "lti_nonquadratic".into()
        },
        model,
        cost,
        basis,
        x0: vec![5.0, 5.0],
        dt: opts.dt,
        weight_support: BoxBounds::symmetric(dim, opts.weight_bound),
        contraction: Some(
            ContractionSpec::identity(2, 2.0, 1.0, 0.5).expect("static setup"),
        ),
        disturbance_bound: Some(0.5),
        collision: None,
        collision_penalty: 0.0,
        goal_predicate: None,
        static_objective: None,
    }
}

/// Axis-aligned rectangular obstacle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.xmin && x <= self.xmax && y >= self.ymin && y <= self.ymax
    }

    /// `count` points equally spaced along the perimeter, starting at the
    /// lower-left corner and walking counterclockwise.
    pub fn boundary_points(&self, count: usize) -> Vec<Vec<f64>> {
        let w = self.xmax - self.xmin;
        let h = self.ymax - self.ymin;
        let perimeter = 2.0 * (w + h);
        (0..count)
            .map(|i| {
                let mut s = perimeter * i as f64 / count as f64;
                if s < w {
                    return vec![self.xmin + s, self.ymin];
                }
                s -= w;
                if s < h {
                    return vec![self.xmax, self.ymin + s];
                }
                s -= h;
                if s < w {
                    return vec![self.xmax - s, self.ymax];
                }
                s -= w;
                vec![self.xmin, self.ymax - s]
            })
            .collect()
    }
}

/// Options for [`dubins_car_with`].
#[derive(Clone, Debug)]
pub struct DubinsOptions {
    pub horizon: f64,
    pub dt: f64,
    pub rbf_sigma: f64,
    pub goal: [f64; 2],
    pub goal_tolerance: f64,
    pub obstacle: Option<Rect>,
    pub collision_penalty: f64,
    pub weight_bound: f64,
}

impl Default for DubinsOptions {
    fn default() -> Self {
        Self {
            horizon: 100.0,
            dt: 0.05,
            rbf_sigma: 5.0,
            goal: [20.0, 20.0],
            goal_tolerance: 0.5,
            obstacle: Some(Rect {
                xmin: 8.0,
                ymin: 8.0,
                xmax: 14.0,
                ymax: 14.0,
            }),
            collision_penalty: 1e6,
            weight_bound: 10.0,
        }
    }
}

/// Dubins car `(x, y, theta)` steering from the origin to a goal while
/// avoiding a rectangular obstacle. The basis is 64 planar grid RBFs plus 13
/// obstacle-boundary RBFs plus three linear terms (80 functions); with two
/// input channels the sampled weight space has dimension 160.
pub fn dubins_car() -> PlanningProblem {
    dubins_car_with(&DubinsOptions::default())
}

pub fn dubins_car_with(opts: &DubinsOptions) -> PlanningProblem {
    let model = SystemModel::new(
        3,
        2,
        vec![-10.0, -5.0],
        vec![10.0, 5.0],
        |x, u| vec![u[0] * x[2].cos(), u[0] * x[2].sin(), u[1]],
    )
    .expect("static setup");

    let running = |x: &[f64], u: &[f64]| {
        let xn: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let un: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        0.1 * (xn + un)
    };
    let goal = opts.goal;
    let terminal = move |x: &[f64], _: &[f64]| {
        1000.0 * ((x[0] - goal[0]).powi(2) + (x[1] - goal[1]).powi(2)).sqrt()
    };
    // The rollout runs the full horizon: reaching the goal does not stop the
    // integral, so a good policy must also hold position there. The goal test
    // (planar distance within tolerance at any grid point) is reported
    // separately through `goal_predicate`.
    let tol = opts.goal_tolerance;
    let cost = CostFunctional::new(running, terminal, opts.horizon).expect("static setup");
    let goal_predicate: CollisionFn = Arc::new(move |x: &[f64]| {
        ((x[0] - goal[0]).powi(2) + (x[1] - goal[1]).powi(2)).sqrt() <= tol
    });

    // planar grid centers: x, y in {-5, 0, ..., 30}
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(64);
    for gx in 0..8 {
        for gy in 0..8 {
            centers.push(vec![-5.0 + 5.0 * gx as f64, -5.0 + 5.0 * gy as f64]);
        }
    }
    if let Some(rect) = &opts.obstacle {
        centers.extend(rect.boundary_points(13));
    }
    let mut basis =
        make_rbf_on(&[0, 1], &centers, opts.rbf_sigma, 3).expect("static setup");
    basis.push(format!("linear x-{}", goal[0]), move |x: &[f64]| x[0] - goal[0]);
    basis.push(format!("linear y-{}", goal[1]), move |x: &[f64]| x[1] - goal[1]);
    basis.push("linear theta", |x: &[f64]| x[2]);
    let dim = 2 * basis.len();

    let collision: Option<CollisionFn> = opts.obstacle.map(|rect| {
        Arc::new(move |x: &[f64]| rect.contains(x[0], x[1])) as CollisionFn
    });

    PlanningProblem {
        name: "dubins_car".into(),
        model,
        cost,
        basis,
        x0: vec![0.0, 0.0, 0.0],
        dt: opts.dt,
        weight_support: BoxBounds::symmetric(dim, opts.weight_bound),
        contraction: None,
        disturbance_bound: None,
        collision,
        collision_penalty: opts.collision_penalty,
        goal_predicate: Some(goal_predicate),
        static_objective: None,
    }
}

/// Simulation-free oracle problem `J(w) = ||w - w_star||^2`; the global
/// minimum is known analytically, which pins down the search's correctness.
pub fn static_quadratic(w_star: &[f64]) -> Result<PlanningProblem> {
    if w_star.is_empty() {
        return Err(SaopError::InvalidParameter(
            "target weight vector must be nonempty".into(),
        ));
    }
    let target = w_star.to_vec();
    let dim = target.len();
    let model = SystemModel::new(1, 1, vec![-1.0], vec![1.0], |_, _| vec![0.0])?;
    let cost = CostFunctional::new(|_, _| 0.0, |_, _| 0.0, 1.0)?;
    let basis = make_polynomial(1, &[vec![]])?;
    Ok(PlanningProblem {
        name: "static_quadratic".into(),
        model,
        cost,
        basis,
        x0: vec![0.0],
        dt: 0.1,
        weight_support: BoxBounds::symmetric(dim, 10.0),
        contraction: None,
        disturbance_bound: None,
        collision: None,
        collision_penalty: 0.0,
        goal_predicate: None,
        static_objective: Some(Arc::new(move |w: &[f64]| {
            w.iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })),
    })
}
