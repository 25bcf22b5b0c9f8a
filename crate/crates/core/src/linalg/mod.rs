// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic dense linear algebra in `f64`.
//!
//! Everything here is a pure function of its inputs: no global state, no
//! randomness, and identical inputs give bit-identical outputs.

mod dense;
mod eigen;
mod pca;
mod power;
mod symmetric;

pub use dense::{dot, fix_sign, norm, DenseMatrix};
pub use eigen::{eigen_spectrum, eigenvalues, Spectrum, MAX_EIGEN_ORDER};
pub use pca::{cosine_similarity, dominant_left_singular_vector, pca_components, PcaResult};
pub use power::{
    power_iteration, principal_eigenvector, PowerResult, Side, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
pub use symmetric::{symmetric_eigen, SymmetricEigen};

