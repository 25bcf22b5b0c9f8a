// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept directions, LAT scans and attention spectral diagnostics over
//! transformer activation dumps.

pub mod actstore;
pub mod artifact;
pub mod cli;
pub mod concept;
pub mod error;
pub mod linalg;
pub mod par;
pub mod scan;
pub mod spectra;
pub mod stats;
pub mod synthlab;

pub use error::{Error, Result};
pub use par::Exec;
