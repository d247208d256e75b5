// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{DMatrix, DVector};

use super::function::AlignmentFunction;
use super::selector::{InterventionSample, VariableSelector};
use crate::error::{check_dim, Error, Result};
use crate::neural::FrozenMlp;

/// Pieces of one interchange kept for the backward pass.
pub(crate) struct Interchange {
    pub h_hat: DVector<f64>,
    /// `h_src − h_trg`.
    pub delta: DVector<f64>,
    /// `h_hat − h_trg`.
    pub shift: DVector<f64>,
}

pub(crate) fn interchange_forward(af: &AlignmentFunction, mask: &DVector<f64>, h_trg: &DVector<f64>, h_src: &DVector<f64>) -> Interchange {
    let delta = h_src - h_trg;
    let shift = af.w_inv() * (af.w() * &delta).component_mul(mask);
    Interchange { h_hat: h_trg + &shift, delta, shift }
}

/// Accumulate `∂L/∂W` given `g = ∂L/∂ĥ` for `ĥ = h_trg + W⁻¹DW(h_src − h_trg)`.
pub(crate) fn interchange_backward(af: &AlignmentFunction, mask: &DVector<f64>, ic: &Interchange, g: &DVector<f64>, grad_w: &mut DMatrix<f64>) {
    let q = af.w_inv().transpose() * g;
    let dq = q.component_mul(mask);
    *grad_w -= &q * ic.shift.transpose();
    *grad_w += &dq * ic.delta.transpose();
}

fn check_batch(model: &FrozenMlp, samples: &[InterventionSample], af: &AlignmentFunction, sel: &VariableSelector) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("intervention batch"));
    }
    check_dim(af.dim(), sel.dim, "selector dimension")?;
    check_dim(af.dim(), model.input_dim(), "model input")?;
    for s in samples {
        check_dim(af.dim(), s.h_trg.len(), "interchange target")?;
        check_dim(af.dim(), s.h_src.len(), "interchange source")?;
        if s.counterfactual_label >= model.n_classes() {
            return Err(Error::Config(format!("counterfactual label {} out of range", s.counterfactual_label)));
        }
    }
    Ok(())
}

/// Mean negative log-probability of the counterfactual labels after
/// interchange on `sel`, with its gradient with respect to `W`.
pub fn das_loss_grad(
    model: &FrozenMlp,
    samples: &[InterventionSample],
    af: &AlignmentFunction,
    sel: &VariableSelector,
) -> Result<(f64, DMatrix<f64>)> {
    check_batch(model, samples, af, sel)?;
    let mask = sel.mask();
    let d = af.dim();
    let mut loss = 0.0;
    let mut grad_w = DMatrix::zeros(d, d);
    let scale = 1.0 / samples.len() as f64;
    for s in samples {
        let ic = interchange_forward(af, &mask, &s.h_trg, &s.h_src);
        let (nll, g) = model.nll_and_input_grad(&ic.h_hat, s.counterfactual_label);
        loss += nll * scale;
        interchange_backward(af, &mask, &ic, &(g * scale), &mut grad_w);
    }
    Ok((loss, grad_w))
}

pub fn das_loss(model: &FrozenMlp, samples: &[InterventionSample], af: &AlignmentFunction, sel: &VariableSelector) -> Result<f64> {
    das_loss_grad(model, samples, af, sel).map(|(l, _)| l)
}

/// Fraction of samples whose post-interchange prediction is the
/// counterfactual label.
pub fn evaluate_iia(model: &FrozenMlp, af: &AlignmentFunction, sel: &VariableSelector, samples: &[InterventionSample]) -> Result<f64> {
    check_batch(model, samples, af, sel)?;
    let mask = sel.mask();
    let hits = samples
        .iter()
        .filter(|s| {
            let ic = interchange_forward(af, &mask, &s.h_trg, &s.h_src);
            model.predict(&ic.h_hat) == s.counterfactual_label
        })
        .count();
    Ok(hits as f64 / samples.len() as f64)
}
