//! Discrete probability measures over patches or classes.

use ndarray::Array1;

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// What a measure stands for in the pipeline. Purely a tag; the numerics do
/// not depend on it except that [`MeasureRole::Frequency`] may be
/// unnormalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeasureRole {
    /// Uniform weight over patches (the row marginal).
    PatchMarginal,
    /// Batch-rescaled class-area target (the column marginal).
    AreaTarget,
    /// Slowly updated class-area estimate.
    AreaState,
    /// Relative class frequency; the only role allowed to be unnormalized.
    Frequency,
}

/// Nonnegative weight vector summing to one (within `SIMPLEX_TOL`).
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure<F: Scalar> {
    weights: Array1<F>,
    role: MeasureRole,
}

/// Absolute tolerance on the simplex constraint.
pub const SIMPLEX_TOL: f64 = 1e-9;

impl<F: Scalar> DiscreteMeasure<F> {
    /// Validates nonnegativity and the unit-sum constraint. The weights are
    /// stored bit-for-bit (a frozen state must survive repeated updates
    /// unchanged); callers with real drift normalize via [`Self::normalized`].
    pub fn new(weights: Array1<F>, role: MeasureRole) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid("measure must have at least one bin"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < F::zero()) {
            return Err(invalid("measure weights must be finite and nonnegative"));
        }
        let sum = weights.sum();
        if role == MeasureRole::Frequency {
            return Ok(Self { weights, role });
        }
        if (sum.as_f64() - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid(format!(
                "measure weights sum to {} (expected 1 within {SIMPLEX_TOL})",
                sum.as_f64()
            )));
        }
        Ok(Self { weights, role })
    }

    /// Normalizes an arbitrary nonnegative vector onto the simplex.
    pub fn normalized(weights: Array1<F>, role: MeasureRole) -> Result<Self> {
        let sum = weights.sum();
        if sum <= F::zero() {
            return Err(invalid("cannot normalize a zero-mass vector"));
        }
        Self::new(weights / sum, role)
    }

    /// Uniform measure over `n` bins.
    pub fn uniform(n: usize, role: MeasureRole) -> Result<Self> {
        if n == 0 {
            return Err(invalid("measure must have at least one bin"));
        }
        let w = F::one() / F::of(n as f64);
        Self::new(Array1::from_elem(n, w), role)
    }

    pub fn weights(&self) -> &Array1<F> {
        &self.weights
    }

    pub fn role(&self) -> MeasureRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Shannon entropy −Σ w log w, natural log, 0·log 0 = 0.
    pub fn entropy(&self) -> F {
        self.weights
            .iter()
            .map(|&w| {
                if w > F::zero() {
                    -w * w.ln()
                } else {
                    F::zero()
                }
            })
            .sum()
    }
}

/// The uniform patch marginal δ = (1/N)·1.
pub fn make_patch_marginal<F: Scalar>(n_patches: usize) -> Result<DiscreteMeasure<F>> {
    if n_patches == 0 {
        return Err(invalid("patch marginal needs at least one patch"));
    }
    DiscreteMeasure::uniform(n_patches, MeasureRole::PatchMarginal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn patch_marginal_uniform() {
        let m = make_patch_marginal::<f64>(4).unwrap();
        assert_eq!(m.weights(), &array![0.25, 0.25, 0.25, 0.25]);
        assert_eq!(m.role(), MeasureRole::PatchMarginal);
    }

    #[test]
    fn patch_marginal_degenerate() {
        let m = make_patch_marginal::<f64>(1).unwrap();
        assert_eq!(m.weights(), &array![1.0]);
    }

    #[test]
    fn patch_marginal_thirds_stay_on_simplex() {
        let m = make_patch_marginal::<f64>(3).unwrap();
        assert!((m.weights().sum() - 1.0).abs() <= 1e-9);
        for &w in m.weights() {
            assert!((w - 1.0 / 3.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_patches_rejected() {
        assert!(make_patch_marginal::<f64>(0).is_err());
    }

    #[test]
    fn rejects_negative_and_bad_sums() {
        assert!(DiscreteMeasure::new(array![-0.1, 1.1], MeasureRole::AreaTarget).is_err());
        assert!(DiscreteMeasure::new(array![0.4, 0.4], MeasureRole::AreaTarget).is_err());
        // Frequency role may stay unnormalized.
        assert!(DiscreteMeasure::new(array![0.4, 0.4], MeasureRole::Frequency).is_ok());
    }

    #[test]
    fn entropy_uniform() {
        let m = DiscreteMeasure::<f64>::uniform(4, MeasureRole::AreaState).unwrap();
        assert!((m.entropy() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn works_at_f32() {
        let m = make_patch_marginal::<f32>(8).unwrap();
        assert!((m.weights().sum() - 1.0f32).abs() < 1e-6);
    }
}
