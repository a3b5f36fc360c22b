//! Experiment execution: single runs, seeded multi-run batches with summary
//! statistics, and weight-vector verification against the contraction tube.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use saop::contraction::{verify_tube, ContractionSpec, TubeReport};
use saop::dynamics::{simulate, Disturbance, Trajectory};
use saop::mras::{self, SaopResult, Termination};
use saop::problems::PlanningProblem;

use crate::config::ExperimentConfig;
use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// `result.json` payload: everything needed to reproduce and audit one run.
#[derive(Serialize)]
pub struct RunReport<'a> {
    pub problem: String,
    pub w_star: &'a [f64],
    pub j_star: f64,
    pub best_w: &'a [f64],
    pub best_j: f64,
    pub iterations: usize,
    pub total_samples: usize,
    pub termination: Termination,
    pub seed: u64,
    pub version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub goal_reached: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub collided: Option<bool>,
    pub rejected_robust: Vec<usize>,
    pub config: &'a ExperimentConfig,
    pub wall_time_s: f64,
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
}

/// Execute one seeded run and write `convergence.csv`, `mu_trace.csv`,
/// `trajectory.csv` (for simulated problems) and `result.json` into `out_dir`.
pub fn execute_run(
    config: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<SaopResult, CliError> {
    let problem = config.build_problem()?;
    let saop_config = config.saop.resolve(seed);
    let robust: Option<ContractionSpec> = match &config.robust {
        Some(settings) => Some(settings.resolve(problem.model.state_dim)?),
        None => None,
    };

    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", out_dir.display())))?;

    let started = Instant::now();
    let result = mras::run(&problem, &saop_config, robust.as_ref())
        .map_err(|e| CliError::Run(e.to_string()))?;
    let wall_time_s = started.elapsed().as_secs_f64();

    write(&out_dir.join("convergence.csv"), &mras::history_csv(&result.history))?;
    write(&out_dir.join("mu_trace.csv"), &mras::mu_trace_csv(&result.history))?;

    let mut goal_reached = None;
    let mut collided = None;
    if problem.static_objective.is_none() {
        match problem.rollout(&result.w_star, None) {
            Ok((traj, _)) => {
                goal_reached = Some(problem.goal_reached(&traj));
                collided = Some(problem.trajectory_collides(&traj));
                write(&out_dir.join("trajectory.csv"), &traj.to_csv())?;
            }
            Err(e) => {
                goal_reached = Some(false);
                collided = Some(false);
                write(
                    &out_dir.join("trajectory.csv"),
                    &format!("# rollout failed: {e}\n"),
                )?;
            }
        }
    }

    let report = RunReport {
        problem: problem.name.clone(),
        w_star: &result.w_star,
        j_star: result.j_star,
        best_w: &result.best_w,
        best_j: result.best_j,
        iterations: result.iterations,
        total_samples: result.total_samples,
        termination: result.termination,
        seed,
        version: VERSION,
        goal_reached,
        collided,
        rejected_robust: result.history.iter().map(|r| r.rejected_robust).collect(),
        config,
        wall_time_s,
    };
    write(
        &out_dir.join("result.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(result)
}

/// `saop run`: one run in `config.output_dir`. Budget exhaustion without
/// convergence is an error (outputs are still written).
pub fn cmd_run(config: &ExperimentConfig) -> Result<(), CliError> {
    let seed = config.effective_seed()?;
    let result = execute_run(config, seed, &config.output_dir)?;
    eprintln!(
        "run finished: {:?} after {} iterations, {} samples, J* = {}",
        result.termination, result.iterations, result.total_samples, result.j_star
    );
    match result.termination {
        Termination::Converged => Ok(()),
        other => Err(CliError::Run(format!(
            "run did not converge: {other:?} after {} iterations / {} samples",
            result.iterations, result.total_samples
        ))),
    }
}

#[derive(Serialize)]
struct RunOutcome {
    seed: u64,
    dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    j_star: Option<f64>,
    termination: Option<Termination>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct MultirunSummary {
    runs: u32,
    succeeded: usize,
    failed: usize,
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
    costs: Vec<f64>,
    outcomes: Vec<RunOutcome>,
    version: &'static str,
    seed: u64,
}

/// `saop multirun`: `runs` independent runs with seeds `seed + i` (or all
/// identical with `identical_seeds`, the determinism audit mode), parallel up
/// to `jobs`. Writes per-run directories plus `summary.json` and
/// `histogram.csv`. A single failed run makes the exit status nonzero, but
/// the summary still covers every success.
pub fn cmd_multirun(
    config: &ExperimentConfig,
    runs: u32,
    jobs: usize,
    identical_seeds: bool,
) -> Result<(), CliError> {
    if runs < 2 {
        return Err(CliError::Config(format!(
            "multirun needs at least 2 runs, got {runs}"
        )));
    }
    let base_seed = config.effective_seed()?;
    fs::create_dir_all(&config.output_dir)
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", config.output_dir.display())))?;

    let tasks: Vec<(u32, u64)> = (0..runs)
        .map(|i| {
            let seed = if identical_seeds {
                base_seed
            } else {
                base_seed + u64::from(i)
            };
            (i, seed)
        })
        .collect();

    let run_one = |&(i, seed): &(u32, u64)| -> RunOutcome {
        let dir = config.output_dir.join(format!("run_{i:03}"));
        match execute_run(config, seed, &dir) {
            Ok(result) => RunOutcome {
                seed,
                dir: format!("run_{i:03}"),
                j_star: Some(result.j_star),
                termination: Some(result.termination),
                error: None,
            },
            Err(e) => RunOutcome {
                seed,
                dir: format!("run_{i:03}"),
                j_star: None,
                termination: None,
                error: Some(e.to_string()),
            },
        }
    };

    let outcomes: Vec<RunOutcome> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Run(format!("cannot build thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            tasks.par_iter().map(run_one).collect()
        })
    } else {
        tasks.iter().map(run_one).collect()
    };

    let costs: Vec<f64> = outcomes.iter().filter_map(|o| o.j_star).collect();
    let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
    let n = costs.len();
    let mean = if n > 0 {
        costs.iter().sum::<f64>() / n as f64
    } else {
        f64::NAN
    };
    let std = if n > 1 {
        (costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let summary = MultirunSummary {
        runs,
        succeeded: n,
        failed,
        mean,
        std,
        min,
        max,
        costs: costs.clone(),
        outcomes,
        version: VERSION,
        seed: base_seed,
    };
    write(
        &config.output_dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    write(&config.output_dir.join("histogram.csv"), &histogram_csv(&costs, 10))?;

    eprintln!(
        "multirun finished: {n}/{runs} succeeded, mean J* = {mean}, std = {std}"
    );
    if failed > 0 {
        return Err(CliError::Run(format!("{failed} of {runs} runs failed")));
    }
    Ok(())
}

/// Fixed-width histogram over `[min, max]`; all-equal costs land in one bin.
fn histogram_csv(costs: &[f64], bins: usize) -> String {
    let mut out = String::from("bin_low,bin_high,count\n");
    if costs.is_empty() {
        return out;
    }
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        out.push_str(&format!("{min},{max},{}\n", costs.len()));
        return out;
    }
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &c in costs {
        let idx = (((c - min) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    for (i, count) in counts.iter().enumerate() {
        let lo = min + width * i as f64;
        let hi = min + width * (i + 1) as f64;
        out.push_str(&format!("{lo},{hi},{count}\n"));
    }
    out
}

#[derive(Serialize)]
struct DisturbedSummary {
    realizations: usize,
    rho_max: f64,
    max_deviation_sq: f64,
    max_ratio_to_envelope: f64,
    within_bound: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    problem: String,
    weight_dim: usize,
    tube: TubeReport,
    disturbed: DisturbedSummary,
    version: &'static str,
}

fn parse_weights(text: &str) -> Result<Vec<f64>, CliError> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CliError::Config(format!("weights file is not valid JSON: {e}")))?;
    let arr = if value.is_array() {
        value
    } else if let Some(w) = value.get("w_star").or_else(|| value.get("w")) {
        w.clone()
    } else {
        return Err(CliError::Config(
            "weights file must be a JSON array or an object with \"w_star\" or \"w\"".into(),
        ));
    };
    arr.as_array()
        .ok_or_else(|| CliError::Config("weights must be a JSON array of numbers".into()))?
        .iter()
        .map(|v| {
            v.as_f64()
                .ok_or_else(|| CliError::Config("weights must be numbers".into()))
        })
        .collect()
}

/// `saop verify`: roll out the nominal trajectory under the given weights,
/// check the contraction tube, and compare disturbed rollouts against the
/// transient deviation envelope. Prints one line per checkpoint and writes
/// `verification.json`.
pub fn cmd_verify(config: &ExperimentConfig, weights_path: &Path) -> Result<(), CliError> {
    let problem = config.build_problem()?;
    if problem.static_objective.is_some() {
        return Err(CliError::Config(
            "verify requires a simulated problem, not a static objective".into(),
        ));
    }
    let text = fs::read_to_string(weights_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", weights_path.display())))?;
    let w = parse_weights(&text)?;
    if w.len() != problem.weight_dim() {
        return Err(CliError::Config(format!(
            "weights have dimension {}, problem expects {}",
            w.len(),
            problem.weight_dim()
        )));
    }
    let spec = match &config.robust {
        Some(settings) => settings.resolve(problem.model.state_dim)?,
        None => problem.contraction.clone().ok_or_else(|| {
            CliError::Config("no robust block in config and the problem has no default".into())
        })?,
    };

    let (nominal, _) = problem
        .rollout(&w, None)
        .map_err(|e| CliError::Run(format!("nominal rollout failed: {e}")))?;
    let tube = verify_tube(&problem.model, &problem.basis, &w, &nominal, &spec);
    for cp in &tube.checkpoints {
        println!("t = {:8.3}  worst margin = {:+.6}", cp.t, cp.worst_margin);
    }
    println!("tube: {}", if tube.pass { "PASS" } else { "FAIL" });
    if let Some(v) = &tube.first_violation {
        println!(
            "first violation at t = {} entry ({},{}) margin {}",
            v.t, v.row, v.col, v.margin
        );
    }

    let disturbed = disturbed_deviation_summary(&problem, &w, &nominal, &spec, 20)?;
    println!(
        "disturbed rollouts: max ||x - x_bar||_M^2 = {:.6}, max ratio to envelope = {:.4} ({})",
        disturbed.max_deviation_sq,
        disturbed.max_ratio_to_envelope,
        if disturbed.within_bound { "within bound" } else { "EXCEEDS bound" }
    );

    fs::create_dir_all(&config.output_dir)
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", config.output_dir.display())))?;
    let report = VerifyReport {
        problem: problem.name.clone(),
        weight_dim: w.len(),
        tube: tube.clone(),
        disturbed,
        version: VERSION,
    };
    write(
        &config.output_dir.join("verification.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    if tube.pass {
        Ok(())
    } else {
        Err(CliError::Run("tube verification failed".into()))
    }
}

fn disturbed_deviation_summary(
    problem: &PlanningProblem,
    w: &[f64],
    nominal: &Trajectory,
    spec: &ContractionSpec,
    realizations: usize,
) -> Result<DisturbedSummary, CliError> {
    let n = problem.model.state_dim;
    let horizon = problem.cost.horizon;
    let mut max_dev = 0.0f64;
    let mut max_ratio = 0.0f64;
    let mut within = true;
    let policy = problem.policy(w);
    for i in 0..realizations {
        let d = Disturbance::piecewise_constant(n, spec.rho_max, 10.0 * problem.dt, horizon, i as u64)
            .map_err(|e| CliError::Run(e.to_string()))?;
        let (traj, _) = simulate(&problem.model, &policy, &problem.x0, &problem.cost, problem.dt, Some(&d))
            .map_err(|e| CliError::Run(format!("disturbed rollout {i} failed: {e}")))?;
        let steps = nominal.states.len().min(traj.states.len());
        for k in 0..steps {
            let diff: Vec<f64> = nominal.states[k]
                .iter()
                .zip(&traj.states[k])
                .map(|(a, b)| a - b)
                .collect();
            let mut dev = 0.0;
            for r in 0..n {
                for c in 0..n {
                    dev += diff[r] * spec.metric[(r, c)] * diff[c];
                }
            }
            max_dev = max_dev.max(dev);
            let envelope = spec.bound_envelope(nominal.times[k]);
            if envelope > 0.0 {
                max_ratio = max_ratio.max(dev / envelope);
            }
            if dev > envelope * 1.05 + 1e-12 {
                within = false;
            }
        }
    }
    Ok(DisturbedSummary {
        realizations,
        rho_max: spec.rho_max,
        max_deviation_sq: max_dev,
        max_ratio_to_envelope: max_ratio,
        within_bound: within,
    })
}
