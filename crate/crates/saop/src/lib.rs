//! Sampling-based approximate optimal feedback planning.
//!
//! The search treats a feedback policy as a weighted sum of basis functions
//! and looks for the best weight vector by iteratively refitting a
//! multivariate Gaussian to the elite fraction of simulated rollouts
//! (model-reference adaptive search). An optional contraction-based tube
//! check restricts the elites to weight vectors whose closed loop tracks its
//! nominal trajectory under bounded disturbances.
//!
//! Modules mirror the moving parts:
//!
//! - [`dynamics`]: fixed-step RK4 rollouts and the finite-horizon cost.
//! - [`basis`]: polynomial / RBF bases and saturated policy evaluation.
//! - [`gaussian`]: the truncated sampling distribution.
//! - [`mras`]: the adaptive search loop (quantile threshold, EM update,
//!   smoothing, stopping).
//! - [`contraction`]: Jacobian-based tube verification and disturbance
//!   bounds.
//! - [`problems`]: benchmark problems and the static oracle objective.
//!
//! Policy evaluations within an iteration run on the rayon pool when the
//! default `parallel` feature is enabled; results are identical (bitwise) to
//! the sequential fallback, so seeded runs reproduce regardless of thread
//! count.

pub mod basis;
pub mod bounds;
pub mod contraction;
pub mod dynamics;
pub mod error;
pub mod gaussian;
pub mod mras;
pub mod problems;

pub use bounds::BoxBounds;
pub use error::{Result, SaopError};
pub use gaussian::GaussianParams;
pub use mras::{run, SaopConfig, SaopResult, Termination};
pub use problems::PlanningProblem;
