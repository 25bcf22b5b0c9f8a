// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::{AttentionDump, MaskKind};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const DEFAULT_ROW_SUM_TOL: f64 = 1e-3;
/// Largest magnitude tolerated above the diagonal of a causal matrix.
pub const MASK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixValidation {
    pub prompt_id: String,
    pub layer: usize,
    pub head: usize,
    pub n: usize,
    pub max_row_sum_deviation: f64,
    pub min_entry: f64,
    /// Entries above the diagonal exceeding [`MASK_TOL`]; always 0 for full masks.
    pub mask_violations: usize,
    pub row_sum_violation: bool,
    pub negativity_violation: bool,
}

impl MatrixValidation {
    pub fn is_clean(&self) -> bool {
        !self.row_sum_violation && !self.negativity_violation && self.mask_violations == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub row_sum_tol: f64,
    pub mask_kind: MaskKind,
    pub matrices: Vec<MatrixValidation>,
    pub violations: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations == 0
    }
}

/// Checks every attention matrix; never stops at the first failure.
pub fn validate_attention(dump: &AttentionDump, row_sum_tol: f64) -> ValidationReport {
    let causal = dump.mask_kind == MaskKind::Causal;
    let matrices: Vec<MatrixValidation> = dump
        .matrices()
        .map(|(key, m)| {
            let n = m.rows();
            let max_row_sum_deviation = m
                .row_sums()
                .iter()
                .map(|s| (s - 1.0).abs())
                .fold(0.0, f64::max);
            let min_entry = m.data().iter().copied().fold(f64::INFINITY, f64::min);
            let mask_violations = if causal {
                (0..n)
                    .map(|i| m.row(i)[i + 1..].iter().filter(|x| x.abs() > MASK_TOL).count())
                    .sum()
            } else {
                0
            };
            MatrixValidation {
                prompt_id: key.prompt_id.clone(),
                layer: key.layer,
                head: key.head,
                n,
                max_row_sum_deviation,
                min_entry,
                mask_violations,
                row_sum_violation: max_row_sum_deviation > row_sum_tol,
                negativity_violation: min_entry < -row_sum_tol,
            }
        })
        .collect();
    let violations = matrices.iter().filter(|m| !m.is_clean()).count();
    ValidationReport {
        row_sum_tol,
        mask_kind: dump.mask_kind,
        matrices,
        violations,
    }
}

/// Clamps negative entries to zero, then divides each row by its sum.
pub fn renormalize_rows(m: &DenseMatrix) -> Result<DenseMatrix> {
    let cols = m.cols();
    let mut data = Vec::with_capacity(m.data().len());
    for row in m.row_iter() {
        let clamped: Vec<f64> = row.iter().map(|x| x.max(0.0)).collect();
        let s: f64 = clamped.iter().sum();
        if !(s > 0.0) {
            return Err(Error::NotStochastic {
                max_row_sum_deviation: 1.0,
                min_entry: row.iter().copied().fold(f64::INFINITY, f64::min),
            });
        }
        data.extend(clamped.into_iter().map(|x| x / s));
    }
    DenseMatrix::new(m.rows(), cols, data)
}
