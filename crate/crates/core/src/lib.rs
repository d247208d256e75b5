// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod alignment;
pub mod counterfactual;
pub mod divergence;
pub mod error;
pub mod format;
pub mod harmless;
pub mod harness;
pub mod neural;
pub mod numerics;
pub mod optim;
pub mod pathology;
pub mod par;
pub mod synthdata;

pub use error::{Error, Result};
