//! Multivariate Gaussian over weight space: truncated sampling, log-domain
//! density evaluation, and parameter validity maintenance.
//!
//! The sampling distribution is the object the search iterates on, so its
//! covariance routinely approaches singularity by design. Factorization
//! failures beyond a tiny jitter repair surface as
//! [`SaopError::DegenerateDistribution`], which the search loop treats as
//! convergence.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bounds::BoxBounds;
use crate::error::{Result, SaopError};

/// Parameters `theta = (mu, Sigma)` of the sampling distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "ParamsRepr", into = "ParamsRepr")]
pub struct GaussianParams {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// JSON form: mean as a flat array, covariance as row-major nested arrays.
#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
}

impl From<GaussianParams> for ParamsRepr {
    fn from(p: GaussianParams) -> Self {
        let d = p.mu.len();
        let sigma = (0..d)
            .map(|i| (0..d).map(|j| p.sigma[(i, j)]).collect())
            .collect();
        Self {
            mu: p.mu.iter().copied().collect(),
            sigma,
        }
    }
}

impl From<ParamsRepr> for GaussianParams {
    fn from(r: ParamsRepr) -> Self {
        let d = r.mu.len();
        let mut sigma = DMatrix::zeros(d, d);
        for (i, row) in r.sigma.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                sigma[(i, j)] = *v;
            }
        }
        Self {
            mu: DVector::from_vec(r.mu),
            sigma,
        }
    }
}

impl GaussianParams {
    /// Validates symmetry (1e-12 relative) and positive semi-definiteness
    /// (eigenvalues no lower than `-1e-10 * trace`).
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(SaopError::DimensionMismatch(format!(
                "covariance is {}x{}, mean has dimension {d}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let scale = sigma.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        for i in 0..d {
            for j in (i + 1)..d {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale {
                    return Err(SaopError::InvalidParameter(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let eigs = sigma.clone().symmetric_eigenvalues();
        let floor = -1e-10 * sigma.trace().abs();
        if eigs.iter().any(|&e| e < floor) {
            return Err(SaopError::InvalidParameter(
                "covariance is not positive semi-definite".into(),
            ));
        }
        Ok(Self { mu, sigma })
    }

    /// Isotropic `N(mu0, scale * I)`.
    pub fn isotropic(mu0: DVector<f64>, scale: f64) -> Result<Self> {
        if !(scale >= 0.0) {
            return Err(SaopError::InvalidParameter(format!(
                "covariance scale must be nonnegative, got {scale}"
            )));
        }
        let d = mu0.len();
        Ok(Self {
            mu: mu0,
            sigma: DMatrix::identity(d, d) * scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Spectral norm of the covariance (largest eigenvalue magnitude).
    pub fn sigma_spectral_norm(&self) -> f64 {
        self.sigma
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .fold(0.0f64, |a, e| a.max(e.abs()))
    }
}

/// Cholesky factor of the covariance. The raw matrix is tried first so that
/// well-conditioned covariances are factored exactly; only on failure is a
/// relative jitter added, with a last-resort absolute jitter for the
/// zero-trace case.
fn cholesky_with_jitter(sigma: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(ch) = sigma.clone().cholesky() {
        return Ok(ch);
    }
    let d = sigma.nrows();
    let jitter = 1e-10 * sigma.trace() / d as f64;
    let mut m = sigma.clone();
    if jitter > 0.0 {
        for i in 0..d {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.clone().cholesky() {
            return Ok(ch);
        }
    }
    for i in 0..d {
        m[(i, i)] += 1e-12;
    }
    m.cholesky().ok_or_else(|| {
        SaopError::DegenerateDistribution(
            "covariance not factorizable after jitter repair".into(),
        )
    })
}

/// Log of the (untruncated) multivariate Gaussian density at `w`.
pub fn log_density(params: &GaussianParams, w: &[f64]) -> Result<f64> {
    let d = params.dim();
    if w.len() != d {
        return Err(SaopError::DimensionMismatch(format!(
            "point has {} entries, distribution has dimension {d}",
            w.len()
        )));
    }
    let ch = cholesky_with_jitter(&params.sigma)?;
    let l = ch.l();
    let log_det: f64 = (0..d).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    let diff = DVector::from_iterator(d, w.iter().zip(params.mu.iter()).map(|(a, b)| a - b));
    let z = l
        .solve_lower_triangular(&diff)
        .ok_or_else(|| SaopError::DegenerateDistribution("singular Cholesky factor".into()))?;
    let quad = z.dot(&z);
    Ok(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad))
}

/// Density `(2 pi)^(-D/2) |Sigma|^(-1/2) exp(-(w-mu)' Sigma^-1 (w-mu) / 2)`.
pub fn density(params: &GaussianParams, w: &[f64]) -> Result<f64> {
    log_density(params, w).map(f64::exp)
}

/// Draw `count` samples via the Cholesky factor, clamping each draw
/// componentwise into the compact support box.
pub fn sample<R: Rng>(
    params: &GaussianParams,
    count: usize,
    support: &BoxBounds,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let d = params.dim();
    if support.dim() != d {
        return Err(SaopError::DimensionMismatch(format!(
            "support box has dimension {}, distribution has {d}",
            support.dim()
        )));
    }
    if count == 0 {
        return Err(SaopError::InvalidParameter("sample count must be >= 1".into()));
    }
    let ch = cholesky_with_jitter(&params.sigma)?;
    let l = ch.l();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let z = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        let x = &params.mu + &l * z;
        let mut v: Vec<f64> = x.iter().copied().collect();
        support.clamp(&mut v);
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn standard(d: usize) -> GaussianParams {
        GaussianParams::isotropic(DVector::zeros(d), 1.0).unwrap()
    }

    #[test]
    fn density_at_mean_matches_formula() {
        let p = standard(2);
        let v = density(&p, &[0.0, 0.0]).unwrap();
        assert_relative_eq!(v, 1.0 / (2.0 * std::f64::consts::PI), epsilon = 1e-15);
    }

    #[test]
    fn scalar_density_with_variance_four() {
        let p = GaussianParams::new(DVector::from_vec(vec![0.0]), DMatrix::from_vec(1, 1, vec![4.0]))
            .unwrap();
        let expected = (-0.5f64).exp() / (2.0 * (2.0 * std::f64::consts::PI).sqrt());
        assert_relative_eq!(density(&p, &[2.0]).unwrap(), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 0.120985, epsilon = 1e-6);
    }

    #[test]
    fn mean_is_global_maximum() {
        let p = GaussianParams::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_vec(2, 2, vec![2.0, 0.3, 0.3, 0.5]),
        )
        .unwrap();
        let at_mean = density(&p, &[1.0, -2.0]).unwrap();
        for probe in [[1.1, -2.0], [0.5, -1.5], [3.0, 0.0], [1.0, -2.01]] {
            assert!(density(&p, &probe).unwrap() < at_mean);
        }
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let bad = DMatrix::from_vec(2, 2, vec![1.0, 0.5, 0.2, 1.0]);
        assert!(GaussianParams::new(DVector::zeros(2), bad).is_err());
    }

    #[test]
    fn indefinite_covariance_rejected() {
        let bad = DMatrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianParams::new(DVector::zeros(2), bad).is_err());
    }

    #[test]
    fn zero_covariance_collapses_to_mean() {
        let mu = DVector::from_vec(vec![3.0, -1.0]);
        let p = GaussianParams::isotropic(mu, 0.0).unwrap();
        let support = BoxBounds::symmetric(2, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in sample(&p, 100, &support, &mut rng).unwrap() {
            assert!((s[0] - 3.0).abs() <= 1e-4);
            assert!((s[1] + 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn mean_outside_support_clamps_to_face() {
        let p = GaussianParams::isotropic(DVector::from_vec(vec![20.0]), 1e-6).unwrap();
        let support = BoxBounds::symmetric(1, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in sample(&p, 50, &support, &mut rng).unwrap() {
            assert_eq!(s[0], 5.0);
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let p = standard(4);
        let support = BoxBounds::symmetric(4, 10.0);
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let a = sample(&p, 32, &support, &mut r1).unwrap();
        let b = sample(&p, 32, &support, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_moments_match_standard_normal() {
        let d = 3;
        let p = standard(d);
        let support = BoxBounds::symmetric(d, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = sample(&p, 100_000, &support, &mut rng).unwrap();
        for i in 0..d {
            let mean: f64 = samples.iter().map(|s| s[i]).sum::<f64>() / samples.len() as f64;
            let var: f64 = samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>()
                / samples.len() as f64;
            assert!(mean.abs() <= 0.02, "mean[{i}] = {mean}");
            assert!((var - 1.0).abs() <= 0.05, "var[{i}] = {var}");
        }
    }

    #[test]
    fn density_integrates_to_one() {
        // Monte-Carlo over a wide box, seeded, for D = 1..3.
        for d in 1..=3usize {
            let p = standard(d);
            let half = 6.0f64;
            let volume = (2.0 * half).powi(d as i32);
            let mut rng = ChaCha8Rng::seed_from_u64(11 + d as u64);
            let n = 400_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-half..half)).collect();
                acc += density(&p, &x).unwrap();
            }
            let estimate = volume * acc / n as f64;
            assert!(
                (estimate - 1.0).abs() <= 0.02,
                "D={d}: integral estimate {estimate}"
            );
        }
    }

    #[test]
    fn json_round_trip_row_major() {
        let p = GaussianParams::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_vec(2, 2, vec![2.0, 0.5, 0.5, 1.0]),
        )
        .unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"mu\":[1.0,2.0]"));
        assert!(json.contains("\"sigma\":[[2.0,0.5],[0.5,1.0]]"));
        let back: GaussianParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}
