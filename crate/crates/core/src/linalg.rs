//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative tolerance for symmetry and positive-semidefiniteness checks on
/// user data.
pub const SYMMETRY_TOL: f64 = 1e-9;

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = max_abs(m);
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return false;
            }
        }
    }
    true
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let sym = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Smallest eigenvalue at least `-1e-9` times the largest one.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    let ev = sym_eigenvalues(m);
    match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) => lo >= -SYMMETRY_TOL * hi.max(0.0),
        _ => true,
    }
}

/// Lower-triangular `G` with `G Gᵀ = m`, or `None` if `m` is not positive
/// definite.
pub fn cholesky_factor(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(m.clone()).map(|c| c.l())
}

/// Quadratic form `vᵀ m⁻¹ v` through a Cholesky factor `G` of `m`.
pub fn inverse_quadratic_form(factor: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let y = factor
        .solve_lower_triangular(v)
        .expect("Cholesky factor has a positive diagonal");
    y.norm_squared()
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}
