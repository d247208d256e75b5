// SPDX-License-Identifier: MIT OR Apache-2.0

//! Learned invertible alignments, interchange interventions and their
//! training against a frozen classifier.

mod checkpoint;
mod function;
mod loss;
mod selector;
mod train;

pub use checkpoint::{alignment_from_text, alignment_to_text, load_alignment, save_alignment};
pub use function::{AlignmentFunction, DEFAULT_RIDGE};
pub use loss::{das_loss, das_loss_grad, evaluate_iia};
pub use selector::{
    combined_mask, counterfactual_key, draw_balanced_samples, draw_samples, make_sample, InterventionSample, VarId, VariableSelector,
};
pub use train::{
    alignment_objective, train_alignment, AlignData, AlignEpoch, AlignHistory, AlignTrainConfig, ClLossKind,
    SelectionMetric,
};
pub(crate) use train::Objective;

/// `W⁻¹((I−D)W·h_trg + D·W·h_src)`.
pub fn interchange(
    af: &AlignmentFunction,
    sel: &VariableSelector,
    h_trg: &nalgebra::DVector<f64>,
    h_src: &nalgebra::DVector<f64>,
) -> crate::Result<nalgebra::DVector<f64>> {
    crate::error::check_dim(af.dim(), sel.dim, "selector dimension")?;
    af.interchange_mask(&sel.mask(), h_trg, h_src)
}

#[cfg(test)]
mod tests;
