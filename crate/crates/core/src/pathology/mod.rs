// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small piecewise-linear circuits and the diagnostics that expose how
//! patched representations can leave the natural data while still steering
//! a model: patch closure, hidden ReLU pathways, class-region projection
//! and dormant changes.

mod analysis;
mod circuit;

pub use analysis::*;
pub use circuit::*;
