//! Generalized symmetric eigenproblem for the ratio objective, and the sin-θ distance
//! between weight vectors.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{check_dims, Result, ScotomaError};
use crate::score::{symmetrize, ScatterPair, WeightVector};

/// Largest admissible condition number of the denominator matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// Relative eigengap below which the top eigenvalue is reported as degenerate.
pub const DEGENERACY_GAP: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
pub struct GeneralizedEigen {
    pub beta: WeightVector,
    /// Largest eigenvalue of `Σ_w⁻¹Σ_b`, equal to the maximum of the ratio objective.
    pub eigenvalue: f64,
    pub second_eigenvalue: Option<f64>,
    /// Top eigenvalue is (numerically) repeated, so `beta` is one of many maximizers.
    pub degenerate: bool,
    pub condition_number: f64,
}

/// Top eigenvector of `Σ_w⁻¹Σ_b`.
///
/// Works through the Cholesky factor `Σ_w = LLᵀ`: the top eigenvector `η` of the
/// symmetric matrix `L⁻¹Σ_b L⁻ᵀ` maps back to `beta ∝ L⁻ᵀη`.
pub fn top_generalized_eigvec(sp: &ScatterPair) -> Result<GeneralizedEigen> {
    top_pencil_eigvec(sp.sigma_b(), sp.sigma_w())
}

/// Maximizer of `βᵀNβ / βᵀDβ` for symmetric `N` and symmetric positive-definite `D`.
pub fn top_pencil_eigvec(numerator: &DMatrix<f64>, denominator: &DMatrix<f64>) -> Result<GeneralizedEigen> {
    let p = denominator.nrows();
    check_dims(p, numerator.nrows())?;
    if p == 0 {
        return Err(ScotomaError::Data("empty scatter matrices".into()));
    }

    let spectrum = SymmetricEigen::new(denominator.clone()).eigenvalues;
    let lo = spectrum.min();
    let hi = spectrum.max();
    let condition_number = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition_number <= MAX_CONDITION) {
        return Err(ScotomaError::Numerical(format!(
            "within-pair scatter is numerically singular (condition number {condition_number:.3e}); \
             increase the ridge lambda"
        )));
    }
    let chol = Cholesky::new(denominator.clone()).ok_or_else(|| {
        ScotomaError::Numerical("within-pair scatter is not positive definite; increase the ridge lambda".into())
    })?;
    let l = chol.l();

    let half = l
        .solve_lower_triangular(numerator)
        .ok_or_else(|| ScotomaError::Numerical("triangular solve failed".into()))?;
    let mut reduced = l
        .solve_lower_triangular(&half.transpose())
        .ok_or_else(|| ScotomaError::Numerical("triangular solve failed".into()))?;
    symmetrize(&mut reduced);

    let eig = SymmetricEigen::new(reduced);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = order[0];
    let eigenvalue = eig.eigenvalues[top];
    let second_eigenvalue = order.get(1).map(|&k| eig.eigenvalues[k]);

    let eta: DVector<f64> = eig.eigenvectors.column(top).into_owned();
    let raw = l
        .transpose()
        .solve_upper_triangular(&eta)
        .ok_or_else(|| ScotomaError::Numerical("triangular solve failed".into()))?;
    let beta = WeightVector::from_dvector(&raw)?;

    let degenerate = match second_eigenvalue {
        _ if eigenvalue <= 0.0 => true,
        Some(second) => eigenvalue - second <= DEGENERACY_GAP * eigenvalue,
        None => false,
    };

    Ok(GeneralizedEigen {
        beta,
        eigenvalue,
        second_eigenvalue,
        degenerate,
        condition_number,
    })
}

/// `‖Σ_w⁻¹Σ_b β − λβ‖₂`
pub fn eigen_residual(sp: &ScatterPair, beta: &WeightVector, eigenvalue: f64) -> Result<f64> {
    check_dims(sp.p(), beta.len())?;
    let chol = Cholesky::new(sp.sigma_w().clone())
        .ok_or_else(|| ScotomaError::Numerical("within-pair scatter is not positive definite".into()))?;
    let b = beta.to_dvector();
    let applied = chol.solve(&(sp.sigma_b() * &b));
    Ok((applied - b * eigenvalue).norm())
}

/// Sine of the angle between two unit vectors, `‖b1b1ᵀ − b2b2ᵀ‖₂`.
///
/// Sign invariant: `subspace_dist(b, −b) = 0`.
pub fn subspace_dist(b1: &[f64], b2: &[f64]) -> Result<f64> {
    check_dims(b1.len(), b2.len())?;
    for b in [b1, b2] {
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(ScotomaError::Data(format!(
                "subspace distance needs unit vectors, got norm {norm}"
            )));
        }
    }
    let cos: f64 = b1.iter().zip(b2).map(|(a, b)| a * b).sum();
    Ok((1.0 - cos * cos).max(0.0).sqrt().min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pair(sw: &[f64], sb: &[f64], p: usize) -> ScatterPair {
        ScatterPair::new(
            DMatrix::from_row_slice(p, p, sw),
            DMatrix::from_row_slice(p, p, sb),
            2,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn diagonal_case() {
        let sp = pair(&[1.0, 0.0, 0.0, 1.0], &[3.0, 0.0, 0.0, 1.0], 2);
        let e = top_generalized_eigvec(&sp).unwrap();
        assert_relative_eq!(e.eigenvalue, 3.0, epsilon = 1e-12);
        assert_relative_eq!(e.beta.as_slice()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(e.beta.as_slice()[1], 0.0, epsilon = 1e-12);
        assert!(!e.degenerate);
    }

    #[test]
    fn symmetric_two_by_two() {
        let sp = pair(&[1.0, 0.0, 0.0, 1.0], &[2.0, 1.0, 1.0, 2.0], 2);
        let e = top_generalized_eigvec(&sp).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(e.eigenvalue, 3.0, epsilon = 1e-12);
        assert_relative_eq!(e.beta.as_slice()[0], h, epsilon = 1e-12);
        assert_relative_eq!(e.beta.as_slice()[1], h, epsilon = 1e-12);
        assert!(eigen_residual(&sp, &e.beta, e.eigenvalue).unwrap() < 1e-12);
    }

    #[test]
    fn repeated_eigenvalue_is_flagged() {
        let sp = pair(&[1.0, 0.0, 0.0, 1.0], &[2.0, 0.0, 0.0, 2.0], 2);
        assert!(top_generalized_eigvec(&sp).unwrap().degenerate);
        let zero = pair(&[1.0, 0.0, 0.0, 1.0], &[0.0; 4], 2);
        assert!(top_generalized_eigvec(&zero).unwrap().degenerate);
    }

    #[test]
    fn singular_denominator_is_rejected() {
        let sp = pair(&[1.0, 1.0, 1.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2);
        let err = top_generalized_eigvec(&sp).unwrap_err().to_string();
        assert!(err.contains("lambda"), "{err}");
    }

    #[test]
    fn subspace_distance_cases() {
        let a = [0.6, 0.8];
        assert_eq!(subspace_dist(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(subspace_dist(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(subspace_dist(&a, &[-0.6, -0.8]).unwrap(), 0.0);
        assert!(subspace_dist(&[1.0, 1.0], &a).is_err());
    }

    #[test]
    fn deterministic_output() {
        let sw = [2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0];
        let sb = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let sp = pair(&sw, &sb, 3);
        let a = top_generalized_eigvec(&sp).unwrap();
        let b = top_generalized_eigvec(&sp).unwrap();
        assert_eq!(a.beta, b.beta);
        assert_eq!(a.eigenvalue.to_bits(), b.eigenvalue.to_bits());
    }
}
