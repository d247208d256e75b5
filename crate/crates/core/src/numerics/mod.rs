// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared numerical kernels.

pub mod matching;
pub mod ols;
pub mod pca;
pub mod rng;
pub mod sinkhorn;

pub use matching::min_cost_matching;
pub use ols::{ols_fit, OlsFit};
pub use pca::{pca, symmetric_eigen, PcaBasis};
pub use rng::{gaussian_matrix, Rng};
pub use sinkhorn::{sinkhorn_divergence, sinkhorn_divergence_with, SinkhornConfig, SinkhornOutcome};
