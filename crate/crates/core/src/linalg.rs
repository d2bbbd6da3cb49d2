//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};

/// Pivot magnitude, relative to the largest entry, treated as zero.
const PIVOT_TOL: f64 = 1e-14;

/// LU factorization with a singularity check on the pivots.
pub struct DenseLu {
    lu: LU<f64, Dyn, Dyn>,
}

impl DenseLu {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension {
                what: "square matrix",
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Singular);
        }
        let scale = a.amax();
        if scale == 0.0 {
            return Err(Error::Singular);
        }
        let lu = a.lu();
        let u = lu.u();
        if u.diagonal().iter().any(|d| d.abs() <= PIVOT_TOL * scale) {
            return Err(Error::Singular);
        }
        Ok(Self { lu })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.lu.solve(rhs).ok_or(Error::Singular)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular);
        }
        Ok(x)
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lu.solve(rhs).ok_or(Error::Singular)
    }
}

/// Solves `A x = rhs` by LU with partial pivoting.
pub fn dense_solve(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if rhs.len() != a.nrows() {
        return Err(Error::Dimension {
            what: "right-hand side",
            expected: a.nrows(),
            got: rhs.len(),
        });
    }
    DenseLu::new(a.clone())?.solve(rhs)
}

pub(crate) fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}
