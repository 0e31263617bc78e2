//! Induced matrix norms and matrix measures (logarithmic norms).
//!
//! For a real n×n matrix `A`:
//!
//! ```text
//! mu_1(A)   = max_j ( a_jj + sum_{i != j} |a_ij| )      column form
//! mu_inf(A) = max_i ( a_ii + sum_{j != i} |a_ij| )      row form
//! mu_2(A)   = lambda_max( (A + A^T) / 2 )
//! ```
//!
//! A weighted measure with invertible weight `Theta` is `mu(Theta A Theta^-1)`.
//! The definitional quotient `(||I + hA|| - 1)/h` is exposed as
//! [`measure_limit_estimate`] and serves as an independent cross-check.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{lu_inverse, symmetric_eigenvalues};

/// Pivot threshold for inverting a weight matrix.
pub const WEIGHT_PIVOT_TOL: f64 = 1e-12;
/// Off-diagonal tolerance of the Jacobi eigensolver.
pub const JACOBI_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    One,
    Two,
    Infinity,
}

impl Norm {
    pub fn parse(s: &str) -> Option<Norm> {
        match s {
            "1" | "one" => Some(Norm::One),
            "2" | "two" => Some(Norm::Two),
            "inf" | "infinity" => Some(Norm::Infinity),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Norm::One => "1",
            Norm::Two => "2",
            Norm::Infinity => "inf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeasureError {
    #[error("matrix is {0}x{1}, expected square")]
    NotSquare(usize, usize),
    #[error("weight matrix is singular")]
    SingularWeight,
    #[error("weight is {0}x{0} but the matrix is {1}x{1}")]
    WeightSize(usize, usize),
    #[error("limit step h = {0} outside (0, 1e-3]")]
    BadStep(f64),
}

/// A base norm and an optional weight; the weight's inverse is computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureKind {
    pub base: Norm,
    weight: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl MeasureKind {
    pub fn new(base: Norm) -> Self {
        MeasureKind { base, weight: None }
    }

    pub fn weighted(base: Norm, theta: DMatrix<f64>) -> Result<Self, MeasureError> {
        if theta.nrows() != theta.ncols() {
            return Err(MeasureError::NotSquare(theta.nrows(), theta.ncols()));
        }
        let inv = lu_inverse(&theta, WEIGHT_PIVOT_TOL).ok_or(MeasureError::SingularWeight)?;
        Ok(MeasureKind {
            base,
            weight: Some((theta, inv)),
        })
    }

    pub fn weight(&self) -> Option<&DMatrix<f64>> {
        self.weight.as_ref().map(|(w, _)| w)
    }

    /// `Theta A Theta^-1`, or `A` itself when unweighted.
    pub fn conjugate(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>, MeasureError> {
        match &self.weight {
            None => Ok(a.clone()),
            Some((w, winv)) => {
                if w.nrows() != a.nrows() {
                    return Err(MeasureError::WeightSize(w.nrows(), a.nrows()));
                }
                Ok(w * a * winv)
            }
        }
    }

    pub fn label(&self) -> String {
        match self.weight {
            None => format!("mu_{}", self.base.label()),
            Some(_) => format!("mu_{{Theta,{}}}", self.base.label()),
        }
    }
}

fn check_square(a: &DMatrix<f64>) -> Result<(), MeasureError> {
    if a.nrows() != a.ncols() {
        return Err(MeasureError::NotSquare(a.nrows(), a.ncols()));
    }
    Ok(())
}

fn unweighted_measure(a: &DMatrix<f64>, base: Norm) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return f64::NEG_INFINITY;
    }
    match base {
        Norm::One => (0..n)
            .map(|j| a[(j, j)] + (0..n).filter(|&i| i != j).map(|i| a[(i, j)].abs()).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max),
        Norm::Infinity => (0..n)
            .map(|i| a[(i, i)] + (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max),
        Norm::Two => {
            let sym = (a + a.transpose()) * 0.5;
            *symmetric_eigenvalues(&sym, JACOBI_TOL)
                .last()
                .expect("nonempty spectrum")
        }
    }
}

/// Matrix measure of a square matrix.
pub fn matrix_measure(a: &DMatrix<f64>, kind: &MeasureKind) -> Result<f64, MeasureError> {
    check_square(a)?;
    let b = kind.conjugate(a)?;
    Ok(unweighted_measure(&b, kind.base))
}

/// Induced operator norm; rectangular matrices are allowed.
pub fn induced_norm(a: &DMatrix<f64>, base: Norm) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    match base {
        Norm::One => a
            .column_iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max),
        Norm::Infinity => a
            .row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max),
        Norm::Two => a
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .fold(0.0, |m, v| f64::max(m, *v)),
    }
}

/// `(||I + hA|| - 1)/h` in the (weighted) induced norm of `kind`.
pub fn measure_limit_estimate(a: &DMatrix<f64>, kind: &MeasureKind, h: f64) -> Result<f64, MeasureError> {
    if !(h > 0.0 && h <= 1e-3) {
        return Err(MeasureError::BadStep(h));
    }
    check_square(a)?;
    let b = kind.conjugate(a)?;
    let n = b.nrows();
    let m = DMatrix::identity(n, n) + b * h;
    Ok((induced_norm(&m, kind.base) - 1.0) / h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 0.0, -3.0])
    }

    #[test]
    fn column_and_row_forms() {
        let a = example();
        assert_eq!(matrix_measure(&a, &MeasureKind::new(Norm::One)).unwrap(), -2.0);
        assert_eq!(matrix_measure(&a, &MeasureKind::new(Norm::Infinity)).unwrap(), -1.0);
    }

    #[test]
    fn two_norm_measure_from_characteristic_polynomial() {
        // symmetric part [[-2, .5], [.5, -3]]: lambda^2 + 5 lambda + 5.75 = 0
        let want = (-5.0 + 2f64.sqrt()) / 2.0;
        let got = matrix_measure(&example(), &MeasureKind::new(Norm::Two)).unwrap();
        assert!((got - want).abs() < 1e-12, "{got}");
    }

    #[test]
    fn zero_matrix_has_zero_measure() {
        for n in 1..5 {
            let z = DMatrix::zeros(n, n);
            for base in [Norm::One, Norm::Two, Norm::Infinity] {
                assert_eq!(matrix_measure(&z, &MeasureKind::new(base)).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn limit_quotients() {
        let one = measure_limit_estimate(&example(), &MeasureKind::new(Norm::One), 1e-6).unwrap();
        assert!((one + 2.0).abs() < 1e-4);
        let id = DMatrix::<f64>::identity(3, 3);
        let v = measure_limit_estimate(&id, &MeasureKind::new(Norm::Two), 1e-6).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
        let skew = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let v = measure_limit_estimate(&skew, &MeasureKind::new(Norm::Two), 1e-6).unwrap();
        assert!(v.abs() < 1e-6);
        assert!(measure_limit_estimate(&skew, &MeasureKind::new(Norm::Two), 0.1).is_err());
    }

    #[test]
    fn induced_norms() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]);
        assert_eq!(induced_norm(&a, Norm::Infinity), 2.0);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(induced_norm(&b, Norm::One), 1.0);
        let row = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert!((induced_norm(&row, Norm::Two) - 5.0).abs() < 1e-14);
    }

    #[test]
    fn errors() {
        let rect = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(
            matrix_measure(&rect, &MeasureKind::new(Norm::One)),
            Err(MeasureError::NotSquare(2, 3))
        ));
        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(MeasureKind::weighted(Norm::One, sing), Err(MeasureError::SingularWeight));
    }

    #[test]
    fn weighted_measure_is_measure_of_conjugate() {
        let theta = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.01]);
        let kind = MeasureKind::weighted(Norm::One, theta).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -4.0, -1.0]);
        let direct = matrix_measure(&kind.conjugate(&a).unwrap(), &MeasureKind::new(Norm::One)).unwrap();
        assert_eq!(matrix_measure(&a, &kind).unwrap(), direct);
        assert!((direct - (-1.0 + 0.04)).abs() < 1e-12);
    }
}
