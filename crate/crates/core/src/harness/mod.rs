// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment orchestration: configs, the dataset → classifier → alignment
//! pipeline, the EMD-vs-IIA regression, parameter sweeps and the suite of
//! closed-form worked examples.

mod config;
mod gradients;
mod pipeline;
mod study;
mod worked;

pub use config::*;
pub use gradients::*;
pub use pipeline::*;
pub use study::*;
pub use worked::*;
