//! Axis-aligned box bounds, used both for input saturation and for the
//! compact support of the weight-space sampling distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaopError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(SaopError::DimensionMismatch(format!(
                "box lower has {} entries, upper has {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if lo > hi {
                return Err(SaopError::InvalidParameter(format!(
                    "box lower[{i}] = {lo} exceeds upper[{i}] = {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric box `[-half_width, half_width]^dim`.
    pub fn symmetric(dim: usize, half_width: f64) -> Self {
        Self {
            lower: vec![-half_width; dim],
            upper: vec![half_width; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Componentwise projection onto the box.
    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inverted_bounds() {
        assert!(BoxBounds::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn clamp_projects_onto_box() {
        let b = BoxBounds::symmetric(2, 1.0);
        let mut x = [3.0, -0.5];
        b.clamp(&mut x);
        assert_eq!(x, [1.0, -0.5]);
        assert!(b.contains(&x));
    }
}
