//! Basis-function families and evaluation of saturated feedback policies
//! `u_j(x) = clip(<w_j, phi(x)>)`.
//!
//! A policy is a weighted sum of scalar basis functions per input channel,
//! projected onto the admissible input set by componentwise saturation.

use std::fmt;
use std::sync::Arc;

use crate::bounds::BoxBounds;
use crate::error::{Result, SaopError};

type BasisFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Ordered family of scalar functions of state, with a human-readable
/// provenance descriptor per function.
#[derive(Clone)]
pub struct BasisSet {
    pub state_dim: usize,
    functions: Vec<BasisFn>,
    descriptors: Vec<String>,
}

impl fmt::Debug for BasisSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BasisSet")
            .field("state_dim", &self.state_dim)
            .field("len", &self.functions.len())
            .field("descriptors", &self.descriptors)
            .finish()
    }
}

impl BasisSet {
    pub fn new(state_dim: usize) -> Self {
        Self {
            state_dim,
            functions: Vec::new(),
            descriptors: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        descriptor: impl Into<String>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) {
        self.functions.push(Arc::new(f));
        self.descriptors.push(descriptor.into());
    }

    /// Append all functions of `other`, preserving order.
    pub fn concat(mut self, other: BasisSet) -> Result<Self> {
        if other.state_dim != self.state_dim {
            return Err(SaopError::DimensionMismatch(
                "cannot concatenate bases over different state dimensions".into(),
            ));
        }
        self.functions.extend(other.functions);
        self.descriptors.extend(other.descriptors);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn descriptors(&self) -> &[String] {
        &self.descriptors
    }

    /// JSON array of descriptors, for experiment provenance.
    pub fn descriptors_json(&self) -> String {
        serde_json::to_string(&self.descriptors).expect("strings serialize")
    }

    /// Evaluate `[phi_1(x), ..., phi_N(x)]`.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.state_dim);
        self.functions.iter().map(|f| f(x)).collect()
    }
}

/// Free-function form of [`BasisSet::eval`].
pub fn eval_basis(basis: &BasisSet, x: &[f64]) -> Vec<f64> {
    basis.eval(x)
}

/// Gaussian radial basis functions `phi_i(x) = exp(-||x - c_i||^2 / (2 sigma^2))`,
/// one per center. Centers must have the full state dimension.
pub fn make_rbf(centers: &[Vec<f64>], sigma: f64) -> Result<BasisSet> {
    let state_dim = centers
        .first()
        .map(Vec::len)
        .ok_or_else(|| SaopError::InvalidParameter("need at least one RBF center".into()))?;
    let dims: Vec<usize> = (0..state_dim).collect();
    make_rbf_on(&dims, centers, sigma, state_dim)
}

/// RBFs whose distance is measured over a subset of state coordinates, e.g.
/// planar centers for a vehicle whose state also carries a heading angle.
/// `centers[i].len()` must equal `dims.len()`.
pub fn make_rbf_on(
    dims: &[usize],
    centers: &[Vec<f64>],
    sigma: f64,
    state_dim: usize,
) -> Result<BasisSet> {
    if !(sigma > 0.0) {
        return Err(SaopError::InvalidParameter(format!(
            "RBF sigma must be positive, got {sigma}"
        )));
    }
    if centers.is_empty() {
        return Err(SaopError::InvalidParameter("need at least one RBF center".into()));
    }
    if let Some(&d) = dims.iter().find(|&&d| d >= state_dim) {
        return Err(SaopError::InvalidParameter(format!(
            "RBF coordinate index {d} out of range for state dimension {state_dim}"
        )));
    }
    let mut basis = BasisSet::new(state_dim);
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    for center in centers {
        if center.len() != dims.len() {
            return Err(SaopError::DimensionMismatch(format!(
                "RBF center has {} coordinates, expected {}",
                center.len(),
                dims.len()
            )));
        }
        let c = center.clone();
        let ds = dims.to_vec();
        let desc = if dims.len() == state_dim {
            format!("rbf center={c:?} sigma={sigma}")
        } else {
            format!("rbf center={c:?} dims={ds:?} sigma={sigma}")
        };
        basis.push(desc, move |x: &[f64]| {
            let sq: f64 = ds
                .iter()
                .zip(&c)
                .map(|(&d, ci)| {
                    let diff = x[d] - ci;
                    diff * diff
                })
                .sum();
            (-sq * inv_two_sigma_sq).exp()
        });
    }
    Ok(basis)
}

/// Monomial basis from exponent multi-indices. Each term is a vector of
/// per-coordinate exponents (shorter vectors are zero-padded); the empty
/// multi-index is the constant function 1.
pub fn make_polynomial(state_dim: usize, terms: &[Vec<u32>]) -> Result<BasisSet> {
    if terms.is_empty() {
        return Err(SaopError::InvalidParameter(
            "need at least one polynomial term".into(),
        ));
    }
    let mut basis = BasisSet::new(state_dim);
    for term in terms {
        if term.len() > state_dim {
            return Err(SaopError::InvalidParameter(format!(
                "multi-index {term:?} has {} entries but state dimension is {state_dim}",
                term.len()
            )));
        }
        let exps = term.clone();
        let desc = describe_monomial(&exps);
        basis.push(desc, move |x: &[f64]| {
            exps.iter()
                .enumerate()
                .map(|(i, &e)| x[i].powi(e as i32))
                .product()
        });
    }
    Ok(basis)
}

fn describe_monomial(exps: &[u32]) -> String {
    let parts: Vec<String> = exps
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > 0)
        .map(|(i, &e)| {
            if e == 1 {
                format!("x{}", i + 1)
            } else {
                format!("x{}^{}", i + 1, e)
            }
        })
        .collect();
    if parts.is_empty() {
        "1".into()
    } else {
        format!("monomial {}", parts.join("*"))
    }
}

/// Weight vector for an `m`-channel policy over an `N`-function basis,
/// flattened channel-major: `w[j*N + i]` weights basis `i` in channel `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub w: Vec<f64>,
    pub channels: usize,
}

impl WeightVector {
    pub fn new(w: Vec<f64>, channels: usize, support: &BoxBounds) -> Result<Self> {
        if channels == 0 || w.len() % channels != 0 {
            return Err(SaopError::DimensionMismatch(format!(
                "weight length {} not divisible into {channels} channels",
                w.len()
            )));
        }
        if !support.contains(&w) {
            return Err(SaopError::InvalidParameter(
                "weight vector lies outside its compact support".into(),
            ));
        }
        Ok(Self { w, channels })
    }

    pub fn channel(&self, j: usize) -> &[f64] {
        let n = self.w.len() / self.channels;
        &self.w[j * n..(j + 1) * n]
    }
}

/// Evaluate the saturated policy `u_j = clip(<w_j, phi(x)>, lower_j, upper_j)`
/// for every channel. `w` is the flattened channel-major weight vector and
/// must have length `m * basis.len()`.
pub fn policy_eval(
    w: &[f64],
    basis: &BasisSet,
    x: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> Vec<f64> {
    let n = basis.len();
    let m = lower.len();
    debug_assert_eq!(w.len(), m * n, "weight vector length must be channels * N");
    debug_assert_eq!(upper.len(), m);
    let phi = basis.eval(x);
    (0..m)
        .map(|j| {
            let dot: f64 = w[j * n..(j + 1) * n]
                .iter()
                .zip(&phi)
                .map(|(wi, pi)| wi * pi)
                .sum();
            dot.clamp(lower[j], upper[j])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cubic_planar_basis() -> BasisSet {
        make_polynomial(
            2,
            &[
                vec![1, 0],
                vec![0, 1],
                vec![2, 0],
                vec![0, 2],
                vec![3, 0],
                vec![0, 3],
            ],
        )
        .unwrap()
    }

    #[test]
    fn polynomial_basis_evaluates_directly() {
        let basis = cubic_planar_basis();
        assert_eq!(basis.eval(&[1.0, 2.0]), vec![1.0, 2.0, 1.0, 4.0, 1.0, 8.0]);
    }

    #[test]
    fn empty_multi_index_is_constant_one() {
        let basis = make_polynomial(2, &[vec![]]).unwrap();
        assert_eq!(basis.eval(&[5.0, -3.0]), vec![1.0]);
    }

    #[test]
    fn cross_term_monomial() {
        let basis = make_polynomial(2, &[vec![1, 1]]).unwrap();
        assert_eq!(basis.eval(&[2.0, 3.0]), vec![6.0]);
    }

    #[test]
    fn out_of_range_multi_index_rejected() {
        assert!(make_polynomial(2, &[vec![1, 0, 2]]).is_err());
    }

    #[test]
    fn rbf_is_one_at_its_center() {
        let basis = make_rbf(&[vec![0.0, 0.0]], 1.0).unwrap();
        assert_eq!(basis.eval(&[0.0, 0.0]), vec![1.0]);
    }

    #[test]
    fn rbf_value_at_unit_distance() {
        let basis = make_rbf(&[vec![0.0]], 1.0).unwrap();
        assert_relative_eq!(basis.eval(&[1.0])[0], (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn duplicate_centers_are_allowed() {
        let basis = make_rbf(&[vec![1.0], vec![1.0]], 2.0).unwrap();
        let vals = basis.eval(&[0.3]);
        assert_eq!(vals[0], vals[1]);
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        assert!(make_rbf(&[vec![0.0]], 0.0).is_err());
        assert!(make_rbf(&[vec![0.0]], -1.0).is_err());
    }

    #[test]
    fn grid_center_count_matches_spacing() {
        // -5..30 in steps of 5 gives 8 values per axis, 64 planar centers.
        let mut centers = Vec::new();
        let mut cx = -5.0;
        while cx <= 30.0 {
            let mut cy = -5.0;
            while cy <= 30.0 {
                centers.push(vec![cx, cy]);
                cy += 5.0;
            }
            cx += 5.0;
        }
        assert_eq!(centers.len(), 64);
        let basis = make_rbf_on(&[0, 1], &centers, 5.0, 3).unwrap();
        assert_eq!(basis.len(), 64);
    }

    #[test]
    fn subspace_rbf_ignores_remaining_coordinates() {
        let basis = make_rbf_on(&[0, 1], &[vec![1.0, 2.0]], 1.0, 3).unwrap();
        let a = basis.eval(&[1.0, 2.0, 0.0]);
        let b = basis.eval(&[1.0, 2.0, 9.0]);
        assert_eq!(a, b);
        assert_eq!(a[0], 1.0);
    }

    #[test]
    fn policy_dot_product_and_saturation() {
        let basis = make_polynomial(1, &[vec![1], vec![2]]).unwrap();
        let w = [1.0, 2.0];
        let wide = policy_eval(&w, &basis, &[2.0], &[-100.0], &[100.0]);
        assert_relative_eq!(wide[0], 10.0);
        let tight = policy_eval(&w, &basis, &[2.0], &[-5.0], &[5.0]);
        assert_relative_eq!(tight[0], 5.0);
        let zero = policy_eval(&[0.0, 0.0], &basis, &[2.0], &[-5.0], &[5.0]);
        assert_relative_eq!(zero[0], 0.0);
    }

    #[test]
    fn weight_vector_channel_slicing() {
        let support = BoxBounds::symmetric(4, 10.0);
        let wv = WeightVector::new(vec![1.0, 2.0, 3.0, 4.0], 2, &support).unwrap();
        assert_eq!(wv.channel(0), &[1.0, 2.0]);
        assert_eq!(wv.channel(1), &[3.0, 4.0]);
        assert!(WeightVector::new(vec![20.0, 0.0, 0.0, 0.0], 2, &support).is_err());
    }

    proptest! {
        #[test]
        fn saturation_never_exceeds_bounds(
            w in proptest::collection::vec(-50.0f64..50.0, 2),
            x in -10.0f64..10.0,
            bound in 0.1f64..20.0,
        ) {
            let basis = make_polynomial(1, &[vec![1], vec![2]]).unwrap();
            let u = policy_eval(&w, &basis, &[x], &[-bound], &[bound]);
            prop_assert!(u[0].abs() <= bound);
        }

        #[test]
        fn linear_in_weights_below_saturation(
            w1 in proptest::collection::vec(-1.0f64..1.0, 2),
            w2 in proptest::collection::vec(-1.0f64..1.0, 2),
            x in -1.0f64..1.0,
        ) {
            let basis = make_polynomial(1, &[vec![1], vec![2]]).unwrap();
            let big = 1e6;
            let a = policy_eval(&w1, &basis, &[x], &[-big], &[big])[0];
            let b = policy_eval(&w2, &basis, &[x], &[-big], &[big])[0];
            let sum_w: Vec<f64> = w1.iter().zip(&w2).map(|(p, q)| p + q).collect();
            let c = policy_eval(&sum_w, &basis, &[x], &[-big], &[big])[0];
            prop_assert!((a + b - c).abs() <= 1e-9);
        }

        #[test]
        fn rbf_range_is_unit_interval(
            x in -30.0f64..30.0,
            c in -30.0f64..30.0,
            sigma in 2.0f64..10.0,
        ) {
            // sigma bounded away from zero keeps exp(-d^2/2s^2) above the
            // smallest positive f64 on this domain
            let basis = make_rbf(&[vec![c]], sigma).unwrap();
            let v = basis.eval(&[x])[0];
            prop_assert!(v > 0.0 && v <= 1.0);
        }
    }
}
