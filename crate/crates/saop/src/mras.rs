//! The SAOP outer loop: sampling-based policy evaluation, elite selection
//! with an adaptive quantile, EM parameter update, smoothing, and stopping.
//!
//! Each iteration draws `N_k` weight vectors from the current Gaussian,
//! scores them by closed-loop simulation, keeps the samples at or below the
//! adaptive threshold `gamma` as elites (optionally filtered by the
//! contraction tube check), and refits the Gaussian to the elites with
//! cost-and-likelihood weights. The covariance contracts toward a point mass
//! at the optimal weight vector; the loop stops when its spectral norm falls
//! below `sigma_stop`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contraction::{verify_tube, ContractionSpec};
use crate::error::{Result, SaopError};
use crate::gaussian::{self, GaussianParams};
use crate::problems::PlanningProblem;

/// Shape of the strictly decreasing positive score function `S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SShape {
    /// `S(x) = exp(-x / c)` with `c` the cost spread of the current elite
    /// set. Tying the scale to the live spread keeps `S(J)^k` discriminating
    /// between elites at every cost magnitude; any fixed scale goes flat once
    /// elite costs concentrate far below it and the refit stops moving.
    ExpNeg,
    /// `S(x) = 1 / x` (costs must be strictly positive). The default:
    /// `S(J)^k` then weighs cost ratios, so the sharpening is scale-free --
    /// gentle while elite costs are within a few percent of each other,
    /// decisive as costs approach a zero-cost optimum.
    Reciprocal,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaopConfig {
    /// Quantile fraction in (0, 1].
    pub rho: f64,
    /// Minimum threshold improvement per accepted iteration.
    pub epsilon: f64,
    /// Sample-increment percentage used when no improvement is found.
    pub alpha: f64,
    /// Smoothing coefficient in (0, 1]; the next parameter is
    /// `lambda * theta_k + (1 - lambda) * theta_star`.
    pub lambda: f64,
    /// Initial sample size `N_1`.
    pub n_initial: usize,
    pub s_shape: SShape,
    /// Stop once the covariance spectral norm drops below this.
    pub sigma_stop: f64,
    pub max_iterations: usize,
    pub max_samples: usize,
    pub seed: u64,
    /// Initial covariance scale: `Sigma_0 = sigma0 * I`.
    pub sigma0: f64,
}

impl Default for SaopConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            epsilon: 0.1,
            alpha: 0.1,
            lambda: 0.5,
            n_initial: 50,
            s_shape: SShape::Reciprocal,
            sigma_stop: 1e-3,
            max_iterations: 100,
            max_samples: 1_000_000,
            seed: 0,
            sigma0: 1.0,
        }
    }
}

impl SaopConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(SaopError::InvalidParameter(msg.into()))
            }
        };
        check(self.rho > 0.0 && self.rho <= 1.0, "rho must lie in (0, 1]")?;
        check(self.epsilon > 0.0, "epsilon must be positive")?;
        check(self.alpha > 0.0, "alpha must be positive")?;
        check(
            self.lambda > 0.0 && self.lambda <= 1.0,
            "lambda must lie in (0, 1]",
        )?;
        check(self.n_initial >= 1, "n_initial must be >= 1")?;
        check(self.sigma_stop > 0.0, "sigma_stop must be positive")?;
        check(self.max_iterations >= 1, "max_iterations must be >= 1")?;
        check(
            self.max_samples >= self.n_initial,
            "max_samples must cover at least the first iteration",
        )?;
        check(self.sigma0 > 0.0, "sigma0 must be positive")?;
        Ok(())
    }
}

/// Mutable state of the search.
#[derive(Clone, Debug)]
pub struct SaopState {
    pub k: usize,
    pub theta: GaussianParams,
    pub gamma: Option<f64>,
    pub rho_current: f64,
    pub n_k: usize,
    pub total_samples: usize,
    pub history: Vec<IterationRecord>,
}

impl SaopState {
    pub fn new(dim: usize, config: &SaopConfig) -> Result<Self> {
        Ok(Self {
            k: 1,
            theta: GaussianParams::isotropic(DVector::zeros(dim), config.sigma0)?,
            gamma: None,
            rho_current: config.rho,
            n_k: config.n_initial,
            total_samples: 0,
            history: Vec::new(),
        })
    }
}

/// One row of the per-iteration convergence trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub n_k: usize,
    pub kappa: f64,
    pub gamma: f64,
    pub best_j: f64,
    pub mean_j: f64,
    pub sigma_norm: f64,
    /// Smallest covariance eigenvalue after the update (PSD audit).
    pub sigma_min_eig: f64,
    pub elites: usize,
    pub rejected_robust: usize,
    pub updated: bool,
    pub mu: Vec<f64>,
}

/// Elite samples of one iteration: `(w, J(x0; w))` pairs with `J <= gamma`.
#[derive(Clone, Debug, Default)]
pub struct EliteSet {
    pub members: Vec<(Vec<f64>, f64)>,
    pub rejected_robust: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Covariance norm fell below `sigma_stop` (or the distribution became
    /// degenerate, which is the same event seen from the factorization).
    Converged,
    IterationBudget,
    SampleBudget,
}

#[derive(Clone, Debug, Serialize)]
pub struct SaopResult {
    /// Final distribution mean: the returned weight vector.
    pub w_star: Vec<f64>,
    /// Cost of `w_star`.
    pub j_star: f64,
    /// Best sample ever drawn and its cost.
    pub best_w: Vec<f64>,
    pub best_j: f64,
    pub iterations: usize,
    pub total_samples: usize,
    pub termination: Termination,
    pub seed: u64,
    pub history: Vec<IterationRecord>,
    pub final_theta: GaussianParams,
}

/// 1-based index of the estimated `(1-rho)`-quantile in a worst-first
/// ordering: `ceil((1 - rho) * n)`, clamped to `[1, n]`. The small epsilon
/// keeps exact integer products (e.g. `0.9 * 10`) from rounding up.
fn quantile_index(rho: f64, n: usize) -> usize {
    let raw = ((1.0 - rho) * n as f64 - 1e-9).ceil() as i64;
    raw.clamp(1, n as i64) as usize
}

/// `ceil((1 + alpha) * n)` with the same guard against float products like
/// `1.1 * 50` landing just above the integer.
fn grow_sample_size(n: usize, alpha: f64) -> usize {
    (((1.0 + alpha) * n as f64) - 1e-9).ceil() as usize
}

/// Estimated `(1-rho)`-quantile: sort costs descending (worst first, stable,
/// so ties keep sample order) and take the entry at `ceil((1-rho) * N)`.
pub fn quantile_cost(costs: &[f64], rho: f64) -> Result<f64> {
    if costs.is_empty() {
        return Err(SaopError::InvalidParameter(
            "cannot take a quantile of an empty cost list".into(),
        ));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(SaopError::InvalidParameter(format!(
            "rho must lie in (0, 1], got {rho}"
        )));
    }
    let mut sorted = costs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[quantile_index(rho, sorted.len()) - 1])
}

/// Outcome of the threshold step.
#[derive(Clone, Debug, PartialEq)]
pub enum ThresholdDecision {
    /// Accept: set `gamma` (and possibly a smaller `rho`), then update theta.
    Update { gamma: f64, rho: f64 },
    /// No sufficient improvement anywhere: keep `gamma` and `theta`, grow the
    /// sample size to `n_next`.
    Skip { n_next: usize },
}

/// Three-way case split on the estimated quantile `kappa`:
/// at `k = 1` initialize `gamma = kappa`; afterwards accept when
/// `kappa <= gamma - epsilon`; otherwise search the largest `rho' < rho`
/// whose quantile still improves by `epsilon`, and failing that grow the
/// sample size by `ceil((1 + alpha) * N_k)`.
pub fn threshold_update(
    kappa: f64,
    state: &SaopState,
    costs_desc: &[f64],
    epsilon: f64,
    alpha: f64,
) -> ThresholdDecision {
    let gamma = match state.gamma {
        None => {
            return ThresholdDecision::Update {
                gamma: kappa,
                rho: state.rho_current,
            }
        }
        Some(g) => g,
    };
    if kappa <= gamma - epsilon {
        return ThresholdDecision::Update {
            gamma: kappa,
            rho: state.rho_current,
        };
    }
    // Walk the descending order past the current quantile index; the first
    // entry that clears gamma - epsilon gives the largest admissible rho'.
    let n = costs_desc.len();
    let start = quantile_index(state.rho_current, n);
    for i in (start + 1)..=n {
        let candidate = costs_desc[i - 1];
        if candidate <= gamma - epsilon {
            return ThresholdDecision::Update {
                gamma: candidate,
                rho: (n - i + 1) as f64 / n as f64,
            };
        }
    }
    ThresholdDecision::Skip {
        n_next: grow_sample_size(state.n_k, alpha),
    }
}

fn log_score(s_shape: SShape, j: f64, s_scale: f64) -> f64 {
    match s_shape {
        SShape::ExpNeg => -j / s_scale,
        SShape::Reciprocal => -j.max(1e-300).ln(),
    }
}

/// Score scale for [`SShape::ExpNeg`]: the cost spread of the elite set,
/// floored so that a degenerate (single-cost) set yields uniform scores.
fn elite_cost_scale(members: &[(Vec<f64>, f64)]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, j) in members {
        lo = lo.min(*j);
        hi = hi.max(*j);
    }
    (hi - lo).max(1e-12 * (1.0 + lo.abs()))
}

/// EM update: refit `(mu, Sigma)` to the elites with per-elite weights
/// `S(J_i)^k / p(w_i; theta_k)`, computed in the log domain and normalized by
/// the maximum before exponentiation. If every weight underflows the update
/// falls back to uniform weights over the elites.
pub fn em_update(
    elites: &EliteSet,
    theta_k: &GaussianParams,
    k: usize,
    s_shape: SShape,
) -> Result<GaussianParams> {
    if elites.members.is_empty() {
        return Err(SaopError::InvalidParameter(
            "EM update requires a nonempty elite set".into(),
        ));
    }
    let d = theta_k.dim();
    let s_scale = elite_cost_scale(&elites.members);
    let mut log_weights = Vec::with_capacity(elites.members.len());
    for (w, j) in &elites.members {
        let lw = k as f64 * log_score(s_shape, *j, s_scale) - gaussian::log_density(theta_k, w)?;
        log_weights.push(lw);
    }
    let max_lw = log_weights.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut weights: Vec<f64> = log_weights.iter().map(|lw| (lw - max_lw).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        log::warn!("elite weights underflowed; falling back to uniform weights");
        weights = vec![1.0; elites.members.len()];
    }
    let total: f64 = weights.iter().sum();

    let mut mu = DVector::zeros(d);
    for ((w, _), omega) in elites.members.iter().zip(&weights) {
        for i in 0..d {
            mu[i] += omega * w[i];
        }
    }
    mu /= total;

    let mut sigma = DMatrix::zeros(d, d);
    for ((w, _), omega) in elites.members.iter().zip(&weights) {
        let diff = DVector::from_iterator(d, w.iter().zip(mu.iter()).map(|(a, b)| a - b));
        sigma.ger(*omega, &diff, &diff, 1.0);
    }
    sigma /= total;
    // symmetrize against accumulated round-off
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(GaussianParams { mu, sigma })
}

/// Smoothing update `theta = lambda * theta_k + (1 - lambda) * theta_star`,
/// applied entrywise to both mean and covariance.
pub fn smooth(
    theta_k: &GaussianParams,
    theta_star: &GaussianParams,
    lambda: f64,
) -> GaussianParams {
    GaussianParams {
        mu: &theta_k.mu * lambda + &theta_star.mu * (1.0 - lambda),
        sigma: &theta_k.sigma * lambda + &theta_star.sigma * (1.0 - lambda),
    }
}

/// Score a batch of weight vectors sequentially, in sample order.
pub fn evaluate_batch_sequential(problem: &PlanningProblem, samples: &[Vec<f64>]) -> Vec<f64> {
    samples.iter().map(|w| problem.evaluate(w)).collect()
}

/// Score a batch of weight vectors on the rayon pool. Costs come back in
/// sample order, so results are identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn evaluate_batch_parallel(problem: &PlanningProblem, samples: &[Vec<f64>]) -> Vec<f64> {
    samples.par_iter().map(|w| problem.evaluate(w)).collect()
}

#[cfg(feature = "parallel")]
pub fn evaluate_batch(problem: &PlanningProblem, samples: &[Vec<f64>]) -> Vec<f64> {
    evaluate_batch_parallel(problem, samples)
}

#[cfg(not(feature = "parallel"))]
pub fn evaluate_batch(problem: &PlanningProblem, samples: &[Vec<f64>]) -> Vec<f64> {
    evaluate_batch_sequential(problem, samples)
}

/// Cost surcharge for samples whose closed loop fails the contraction tube
/// check. Large enough to expel them from any feasible-cost threshold, small
/// enough that diverged rollouts still sort strictly worse.
pub const ROBUST_PENALTY: f64 = 1e9;

/// Score one weight vector and verify its tube condition on the same nominal
/// rollout. Diverged rollouts fail verification by definition.
fn evaluate_with_tube(
    problem: &PlanningProblem,
    spec: &ContractionSpec,
    w: &[f64],
) -> (f64, bool) {
    match problem.rollout(w, None) {
        Ok((traj, j)) => {
            let j = if problem.trajectory_collides(&traj) {
                j + problem.collision_penalty
            } else {
                j
            };
            let ok = verify_tube(&problem.model, &problem.basis, w, &traj, spec).pass;
            (if ok { j } else { j + ROBUST_PENALTY }, ok)
        }
        Err(_) => (crate::dynamics::PENALTY_DIVERGED, false),
    }
}

/// Batch variant of [`evaluate_with_tube`], parallel when enabled.
fn evaluate_batch_with_tube(
    problem: &PlanningProblem,
    spec: &ContractionSpec,
    samples: &[Vec<f64>],
) -> (Vec<f64>, Vec<bool>) {
    #[cfg(feature = "parallel")]
    let scored: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|w| evaluate_with_tube(problem, spec, w))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let scored: Vec<(f64, bool)> = samples
        .iter()
        .map(|w| evaluate_with_tube(problem, spec, w))
        .collect();
    scored.into_iter().unzip()
}

/// Run the full search. Policy evaluations within an iteration execute in
/// parallel when the `parallel` feature is enabled; the run is reproducible
/// from `config.seed` either way.
pub fn run(
    problem: &PlanningProblem,
    config: &SaopConfig,
    robust: Option<&ContractionSpec>,
) -> Result<SaopResult> {
    config.validate()?;
    problem.validate()?;
    let dim = problem.weight_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = SaopState::new(dim, config)?;
    let mut best_w: Vec<f64> = vec![0.0; dim];
    let mut best_j = f64::INFINITY;
    let termination;

    loop {
        let samples = match gaussian::sample(&state.theta, state.n_k, &problem.weight_support, &mut rng)
        {
            Ok(s) => s,
            Err(SaopError::DegenerateDistribution(_)) => {
                termination = Termination::Converged;
                break;
            }
            Err(e) => return Err(e),
        };
        // With the robust filter on, each sample is scored and tube-verified
        // on a single nominal rollout; failing samples carry ROBUST_PENALTY
        // so the threshold machinery never chases infeasible cost levels.
        let (costs, tube_ok) = match robust {
            Some(spec) => {
                let (c, ok) = evaluate_batch_with_tube(problem, spec, &samples);
                (c, Some(ok))
            }
            None => (evaluate_batch(problem, &samples), None),
        };
        state.total_samples += samples.len();

        for (w, &j) in samples.iter().zip(&costs) {
            if j < best_j {
                best_j = j;
                best_w = w.clone();
            }
        }
        let iter_best = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let iter_mean = costs.iter().sum::<f64>() / costs.len() as f64;

        let mut sorted = costs.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let kappa = sorted[quantile_index(state.rho_current, sorted.len()) - 1];

        // A stalled iteration keeps gamma and rho and widens the sample
        // budget, but the elite refit below still runs against the frozen
        // threshold: the S(J)^k sharpening is what drives the distribution
        // into the optimum once quantile improvements drop under epsilon.
        let decision = threshold_update(kappa, &state, &sorted, config.epsilon, config.alpha);
        match decision {
            ThresholdDecision::Skip { n_next } => {
                state.n_k = n_next;
            }
            ThresholdDecision::Update { gamma, rho } => {
                state.gamma = Some(gamma);
                state.rho_current = rho;
            }
        }

        let gamma = state.gamma.expect("set at k = 1");
        let mut elites = EliteSet::default();
        for (i, (w, &j)) in samples.iter().zip(&costs).enumerate() {
            if j <= gamma {
                match &tube_ok {
                    Some(ok) if !ok[i] => elites.rejected_robust += 1,
                    _ => elites.members.push((w.clone(), j)),
                }
            }
        }
        let elites_len = elites.members.len();
        let rejected_robust = elites.rejected_robust;
        let mut updated = false;
        if elites.members.is_empty() {
            // nothing to refit on (all rejected, or the threshold outran the
            // samples): widen the sample budget instead
            if matches!(decision, ThresholdDecision::Update { .. }) {
                state.n_k = grow_sample_size(state.n_k, config.alpha);
            }
        } else {
            let theta_star = match em_update(&elites, &state.theta, state.k, config.s_shape) {
                Ok(t) => t,
                Err(SaopError::DegenerateDistribution(_)) => {
                    termination = Termination::Converged;
                    break;
                }
                Err(e) => return Err(e),
            };
            state.theta = smooth(&state.theta, &theta_star, config.lambda);
            updated = true;
        }

        let eigs = state.theta.sigma.clone().symmetric_eigenvalues();
        let sigma_norm = eigs.iter().fold(0.0f64, |a, e| a.max(e.abs()));
        let sigma_min_eig = eigs.iter().copied().fold(f64::INFINITY, f64::min);
        state.history.push(IterationRecord {
            k: state.k,
            n_k: samples.len(),
            kappa,
            gamma: state.gamma.unwrap_or(f64::NAN),
            best_j: iter_best,
            mean_j: iter_mean,
            sigma_norm,
            sigma_min_eig,
            elites: elites_len,
            rejected_robust,
            updated,
            mu: state.theta.mu.iter().copied().collect(),
        });

        if sigma_norm < config.sigma_stop {
            termination = Termination::Converged;
            break;
        }
        if state.k >= config.max_iterations {
            termination = Termination::IterationBudget;
            break;
        }
        if state.total_samples + state.n_k > config.max_samples {
            termination = Termination::SampleBudget;
            break;
        }
        state.k += 1;
    }

    let w_star: Vec<f64> = state.theta.mu.iter().copied().collect();
    let j_star = problem.evaluate(&w_star);
    Ok(SaopResult {
        w_star,
        j_star,
        best_w,
        best_j,
        iterations: state.k,
        total_samples: state.total_samples,
        termination,
        seed: config.seed,
        history: state.history,
        final_theta: state.theta,
    })
}

/// Per-iteration convergence trace as CSV
/// (`k,N_k,kappa,gamma,best_J,mean_J,sigma_norm,elites,rejected_robust`).
pub fn history_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("k,N_k,kappa,gamma,best_J,mean_J,sigma_norm,elites,rejected_robust\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.k, r.n_k, r.kappa, r.gamma, r.best_j, r.mean_j, r.sigma_norm, r.elites, r.rejected_robust
        ));
    }
    out
}

/// Mean snapshots as CSV (`k,mu_1..mu_D`).
pub fn mu_trace_csv(history: &[IterationRecord]) -> String {
    let dim = history.first().map_or(0, |r| r.mu.len());
    let mut out = String::from("k");
    for i in 1..=dim {
        out.push_str(&format!(",mu_{i}"));
    }
    out.push('\n');
    for r in history {
        out.push_str(&format!("{}", r.k));
        for v in &r.mu {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
