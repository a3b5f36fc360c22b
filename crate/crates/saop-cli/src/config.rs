//! Experiment configuration: strict JSON parsing, per-field defaults, and
//! construction of the problem / search / verification objects.
//!
//! Unknown fields are rejected at every level so a typo in a config never
//! silently falls back to a default.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use saop::contraction::{ContractionSpec, DEFAULT_BALL_SAMPLES, DEFAULT_CHECK_STRIDE};
use saop::mras::{SShape, SaopConfig};
use saop::problems::{
    dubins_car_with, lti_nonquadratic_with, static_quadratic, DubinsOptions, LtiOptions,
    PlanningProblem, Rect,
};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemName {
    LtiNonquadratic,
    DubinsCar,
    StaticQuadratic,
}

/// Problem-level overrides. Only fields meaningful for the selected problem
/// are consulted; the rest are ignored.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemOverrides {
    /// Integration step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Cost horizon in seconds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// `"full"` (default) or `"linear"`; the linear variant keeps only the
    /// first-order terms of the polynomial basis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub basis: Option<String>,
    /// Target weight vector for `static_quadratic`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    /// RBF width for `dubins_car`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rbf_sigma: Option<f64>,
    /// Rectangular obstacle `[xmin, ymin, xmax, ymax]`; `null` keeps the
    /// default obstacle, `[]` removes it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obstacle: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub collision_penalty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub goal_tolerance: Option<f64>,
    /// Half-width of the symmetric weight support box.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_bound: Option<f64>,
}

/// Search settings; every field optional, defaults from [`SaopConfig`].
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaopSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_initial: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_shape: Option<SShape>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_stop: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<f64>,
}

impl SaopSettings {
    pub fn resolve(&self, seed: u64) -> SaopConfig {
        let d = SaopConfig::default();
        SaopConfig {
            rho: self.rho.unwrap_or(d.rho),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            alpha: self.alpha.unwrap_or(d.alpha),
            lambda: self.lambda.unwrap_or(d.lambda),
            n_initial: self.n_initial.unwrap_or(d.n_initial),
            s_shape: self.s_shape.unwrap_or(d.s_shape),
            sigma_stop: self.sigma_stop.unwrap_or(d.sigma_stop),
            max_iterations: self.max_iterations.unwrap_or(d.max_iterations),
            max_samples: self.max_samples.unwrap_or(d.max_samples),
            seed,
            sigma0: self.sigma0.unwrap_or(d.sigma0),
        }
    }
}

/// Contraction tube settings for the robust elite filter and `verify`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ell: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_max: Option<f64>,
    /// Row-major metric matrix; identity when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ball_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check_stride: Option<usize>,
}

impl RobustSettings {
    pub fn resolve(&self, state_dim: usize) -> Result<ContractionSpec, CliError> {
        let metric = match &self.metric {
            None => DMatrix::identity(state_dim, state_dim),
            Some(rows) => {
                if rows.len() != state_dim || rows.iter().any(|r| r.len() != state_dim) {
                    return Err(CliError::Config(format!(
                        "robust.metric must be {state_dim}x{state_dim}"
                    )));
                }
                let mut m = DMatrix::zeros(state_dim, state_dim);
                for (i, row) in rows.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        m[(i, j)] = *v;
                    }
                }
                m
            }
        };
        let spec = ContractionSpec::new(
            metric,
            self.beta.unwrap_or(2.0),
            self.ell.unwrap_or(1.0),
            self.rho_max.unwrap_or(0.5),
        )
        .map_err(|e| CliError::Config(format!("robust block: {e}")))?
        .with_ball_samples(self.ball_samples.unwrap_or(DEFAULT_BALL_SAMPLES))
        .with_check_stride(self.check_stride.unwrap_or(DEFAULT_CHECK_STRIDE));
        Ok(spec)
    }
}

fn default_runs() -> u32 {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemName,
    #[serde(default)]
    pub overrides: ProblemOverrides,
    #[serde(default)]
    pub saop: SaopSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robust: Option<RobustSettings>,
    #[serde(default = "default_runs")]
    pub runs: u32,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parse strictly from JSON text. The error message names the offending
    /// key or value.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Effective seed: the `SAOP_SEED` environment variable wins over the
    /// config file.
    pub fn effective_seed(&self) -> Result<u64, CliError> {
        match std::env::var("SAOP_SEED") {
            Ok(v) => v
                .parse::<u64>()
                .map_err(|_| CliError::Config(format!("SAOP_SEED must be a u64, got {v:?}"))),
            Err(_) => Ok(self.seed),
        }
    }

    pub fn build_problem(&self) -> Result<PlanningProblem, CliError> {
        let o = &self.overrides;
        let problem = match self.problem {
            ProblemName::LtiNonquadratic => {
                let mut opts = LtiOptions::default();
                if let Some(dt) = o.dt {
                    opts.dt = dt;
                }
                if let Some(h) = o.horizon {
                    opts.horizon = h;
                }
                if let Some(wb) = o.weight_bound {
                    opts.weight_bound = wb;
                }
                match o.basis.as_deref() {
                    None | Some("full") => {}
                    Some("linear") => opts.linear_basis_only = true,
                    Some(other) => {
                        return Err(CliError::Config(format!(
                            "overrides.basis must be \"full\" or \"linear\", got {other:?}"
                        )))
                    }
                }
                lti_nonquadratic_with(&opts)
            }
            ProblemName::DubinsCar => {
                let mut opts = DubinsOptions::default();
                if let Some(dt) = o.dt {
                    opts.dt = dt;
                }
                if let Some(h) = o.horizon {
                    opts.horizon = h;
                }
                if let Some(s) = o.rbf_sigma {
                    opts.rbf_sigma = s;
                }
                if let Some(p) = o.collision_penalty {
                    opts.collision_penalty = p;
                }
                if let Some(tol) = o.goal_tolerance {
                    opts.goal_tolerance = tol;
                }
                if let Some(wb) = o.weight_bound {
                    opts.weight_bound = wb;
                }
                match &o.obstacle {
                    None => {}
                    Some(v) if v.is_empty() => opts.obstacle = None,
                    Some(v) if v.len() == 4 => {
                        opts.obstacle = Some(Rect {
                            xmin: v[0],
                            ymin: v[1],
                            xmax: v[2],
                            ymax: v[3],
                        })
                    }
                    Some(v) => {
                        return Err(CliError::Config(format!(
                            "overrides.obstacle must have 4 entries (or 0 to disable), got {}",
                            v.len()
                        )))
                    }
                }
                dubins_car_with(&opts)
            }
            ProblemName::StaticQuadratic => {
                let target = o
                    .target
                    .clone()
                    .unwrap_or_else(|| vec![0.8, -1.2, 0.5, 1.0, -0.6, 0.9]);
                static_quadratic(&target)
                    .map_err(|e| CliError::Config(format!("overrides.target: {e}")))?
            }
        };
        problem
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(problem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg =
            ExperimentConfig::from_json(r#"{"problem":"static_quadratic","output_dir":"out"}"#)
                .unwrap();
        assert_eq!(cfg.runs, 1);
        assert_eq!(cfg.seed, 0);
        let sc = cfg.saop.resolve(7);
        assert_eq!(sc.seed, 7);
        assert_eq!(sc.n_initial, 50);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = ExperimentConfig::from_json(
            r#"{"problem":"dubins_car","output_dir":"out","typo_key":1}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("typo_key"), "{err}");
    }

    #[test]
    fn unknown_nested_key_is_rejected() {
        let err = ExperimentConfig::from_json(
            r#"{"problem":"dubins_car","output_dir":"out","saop":{"rho":0.2,"bogus":3}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn robust_settings_build_identity_spec() {
        let cfg = ExperimentConfig::from_json(
            r#"{"problem":"lti_nonquadratic","output_dir":"out","robust":{"beta":2.0,"ell":1.0,"rho_max":0.5}}"#,
        )
        .unwrap();
        let spec = cfg.robust.as_ref().unwrap().resolve(2).unwrap();
        assert_eq!(spec.metric[(0, 0)], 1.0);
        assert_eq!(spec.metric[(0, 1)], 0.0);
        assert_eq!(spec.beta, 2.0);
    }

    #[test]
    fn lti_linear_ablation_via_overrides() {
        let cfg = ExperimentConfig::from_json(
            r#"{"problem":"lti_nonquadratic","output_dir":"out","overrides":{"basis":"linear"}}"#,
        )
        .unwrap();
        let p = cfg.build_problem().unwrap();
        assert_eq!(p.weight_dim(), 2);
    }
}
