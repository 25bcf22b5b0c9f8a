// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::dense::{fix_sign, norm, DenseMatrix};
use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Which eigenvector to iterate for: `m·x = λx` or `xᵀm = λxᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Right,
    Left,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerResult {
    pub eigenvalue: f64,
    pub eigenvector: Vec<f64>,
    /// Number of matrix products taken.
    pub iterations: usize,
    /// `‖m·x − λx‖` (or the left analogue) before each normalization step.
    pub residuals: Vec<f64>,
}

/// Power iteration from the normalized all-ones vector.
///
/// Stops once the Rayleigh-quotient residual drops to `tol`. The returned
/// eigenvector has its largest-magnitude entry positive.
pub fn power_iteration(
    m: &DenseMatrix,
    side: Side,
    tol: f64,
    max_iter: usize,
) -> Result<PowerResult> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let n = m.rows();
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut residuals = Vec::new();
    for it in 1..=max_iter {
        let y = match side {
            Side::Right => m.mul_vec(&x)?,
            Side::Left => m.vec_mul(&x)?,
        };
        let lambda: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let residual = y
            .iter()
            .zip(&x)
            .map(|(yi, xi)| (yi - lambda * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        residuals.push(residual);
        if residual <= tol {
            fix_sign(&mut x);
            return Ok(PowerResult {
                eigenvalue: lambda,
                eigenvector: x,
                iterations: it,
                residuals,
            });
        }
        let ny = norm(&y);
        if ny == 0.0 {
            // x landed in the null space; nothing left to iterate on.
            return Err(Error::NoConvergence {
                method: "power iteration",
                iterations: it,
            });
        }
        x = y.into_iter().map(|v| v / ny).collect();
    }
    Err(Error::NoConvergence {
        method: "power iteration",
        iterations: max_iter,
    })
}

/// [`power_iteration`] with the default tolerance and iteration budget.
pub fn principal_eigenvector(m: &DenseMatrix, side: Side) -> Result<PowerResult> {
    power_iteration(m, side, DEFAULT_TOL, DEFAULT_MAX_ITER)
}
