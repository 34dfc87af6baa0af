//! Eigenvalues of general real matrices, only for reporting whether A and
//! A + A1 are Hurwitz / Schur. Backed by nalgebra's Schur decomposition.

use crate::linalg::Matrix;
use nalgebra::DMatrix;

pub fn eigenvalues(m: &Matrix) -> Vec<(f64, f64)> {
    let d = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let mut ev: Vec<(f64, f64)> = d.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    ev
}

/// max Re λ
pub fn spectral_abscissa(m: &Matrix) -> f64 {
    eigenvalues(m).iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max)
}

/// max |λ|
pub fn spectral_radius(m: &Matrix) -> f64 {
    eigenvalues(m).iter().map(|e| e.0.hypot(e.1)).fold(0.0, f64::max)
}

pub fn is_hurwitz(m: &Matrix) -> bool {
    spectral_abscissa(m) < 0.0
}

pub fn is_schur(m: &Matrix) -> bool {
    spectral_radius(m) < 1.0
}
