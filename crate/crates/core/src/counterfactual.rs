// SPDX-License-Identifier: MIT OR Apache-2.0

//! Counterfactual latents: class-conditional mean representations and the
//! losses that pull intervened vectors toward them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentFunction, VariableSelector};
use crate::error::{check_dim, Error, Result};
use crate::synthdata::LabeledRep;

/// Norm below which a cosine is treated as undefined.
pub const ZERO_NORM: f64 = 1e-12;

fn key_bits(x1: f64, x2: f64) -> (u64, u64) {
    // `+ 0.0` folds -0.0 onto 0.0.
    ((x1 + 0.0).to_bits(), (x2 + 0.0).to_bits())
}

/// Natural vectors grouped by their exact `(x1, x2)` values.
#[derive(Clone, Debug, Default)]
pub struct ClIndex {
    groups: BTreeMap<(u64, u64), Vec<DVector<f64>>>,
    means: BTreeMap<(u64, u64), DVector<f64>>,
}

impl ClIndex {
    pub fn from_reps(reps: &[LabeledRep]) -> Self {
        let mut groups: BTreeMap<(u64, u64), Vec<DVector<f64>>> = BTreeMap::new();
        for r in reps {
            groups.entry(key_bits(r.x1, r.x2)).or_default().push(r.h.clone());
        }
        let means = groups
            .iter()
            .map(|(k, vs)| {
                let sum = vs.iter().skip(1).fold(vs[0].clone(), |acc, v| acc + v);
                (*k, sum / vs.len() as f64)
            })
            .collect();
        Self { groups, means }
    }

    pub fn members(&self, x1: f64, x2: f64) -> &[DVector<f64>] {
        self.groups.get(&key_bits(x1, x2)).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, x1: f64, x2: f64) -> bool {
        self.means.contains_key(&key_bits(x1, x2))
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Mean of every natural vector carrying the values `key`.
pub fn cl_vector(index: &ClIndex, key: (f64, f64)) -> Result<&DVector<f64>> {
    index.means.get(&key_bits(key.0, key.1)).ok_or(Error::MissingCl { x1: key.0, x2: key.1 })
}

pub fn cosine(x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    let (nx, ny) = (x.norm(), y.norm());
    if nx < ZERO_NORM || ny < ZERO_NORM {
        return Err(Error::CosineUndefined);
    }
    Ok(x.dot(y) / (nx * ny))
}

/// `½‖x − y‖² − ½cos(x, y)` and its gradient in `x`, or `None` for the
/// cosine part when a norm vanishes.
fn cl_term(x: &DVector<f64>, y: &DVector<f64>) -> (f64, DVector<f64>, bool) {
    let diff = x - y;
    let mut loss = 0.5 * diff.norm_squared();
    let mut grad = diff;
    let (nx, ny) = (x.norm(), y.norm());
    let defined = nx >= ZERO_NORM && ny >= ZERO_NORM;
    if defined {
        let dot = x.dot(y);
        loss -= 0.5 * dot / (nx * ny);
        grad -= (y / (nx * ny) - x * (dot / (nx.powi(3) * ny))) * 0.5;
    }
    (loss, grad, defined)
}

pub fn cl_loss(h_hat: &DVector<f64>, h_cl: &DVector<f64>) -> Result<f64> {
    cl_loss_grad(h_hat, h_cl).map(|(l, _)| l)
}

/// [`cl_loss`] with its gradient in `h_hat`.
pub fn cl_loss_grad(h_hat: &DVector<f64>, h_cl: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    check_dim(h_cl.len(), h_hat.len(), "CL vector")?;
    let (loss, grad, defined) = cl_term(h_hat, h_cl);
    if !defined {
        return Err(Error::CosineUndefined);
    }
    Ok((loss, grad))
}

/// What to do when a projected vector has (near) zero norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZeroNormPolicy {
    Error,
    DropCosine,
}

#[derive(Clone, Debug)]
pub struct ModifiedClGrad {
    pub loss: f64,
    pub grad_h_hat: DVector<f64>,
    /// Direct dependence on `W` through the projections of `h_hat`.
    pub grad_w: DMatrix<f64>,
    pub dropped_cosines: usize,
}

/// Sum over selectors of the CL loss between the per-subspace components
/// `W⁻¹DᵢW·ĥ` and `W⁻¹DᵢW·h_CL`, the latter held constant.
pub fn modified_cl_loss(
    h_hat: &DVector<f64>,
    h_cl: &DVector<f64>,
    af: &AlignmentFunction,
    selectors: &[&VariableSelector],
) -> Result<f64> {
    modified_cl_loss_grad(h_hat, h_cl, af, selectors, ZeroNormPolicy::Error).map(|g| g.loss)
}

pub fn modified_cl_loss_grad(
    h_hat: &DVector<f64>,
    h_cl: &DVector<f64>,
    af: &AlignmentFunction,
    selectors: &[&VariableSelector],
    policy: ZeroNormPolicy,
) -> Result<ModifiedClGrad> {
    let d = af.dim();
    check_dim(d, h_hat.len(), "intervened vector")?;
    check_dim(d, h_cl.len(), "CL vector")?;
    for (i, s) in selectors.iter().enumerate() {
        check_dim(d, s.dim, "selector dimension")?;
        if selectors[..i].iter().any(|o| o.overlaps(s)) {
            return Err(Error::Config("selectors overlap".into()));
        }
    }
    let z_hat = af.w() * h_hat;
    let z_cl = af.w() * h_cl;
    let mut out = ModifiedClGrad {
        loss: 0.0,
        grad_h_hat: DVector::zeros(d),
        grad_w: DMatrix::zeros(d, d),
        dropped_cosines: 0,
    };
    for sel in selectors {
        let mask = sel.mask();
        let r = af.w_inv() * z_hat.component_mul(&mask);
        let target = af.w_inv() * z_cl.component_mul(&mask);
        let (loss, g_r, defined) = cl_term(&r, &target);
        if !defined {
            if policy == ZeroNormPolicy::Error {
                return Err(Error::CosineUndefined);
            }
            out.dropped_cosines += 1;
        }
        out.loss += loss;
        // r = W⁻¹DWĥ: with p = W⁻ᵀg, ∂W = −p·rᵀ + (Dp)·ĥᵀ and ∂ĥ = WᵀDp.
        let p = af.w_inv().transpose() * g_r;
        let dp = p.component_mul(&mask);
        out.grad_w -= &p * r.transpose();
        out.grad_w += &dp * h_hat.transpose();
        out.grad_h_hat += af.w().transpose() * dp;
    }
    Ok(out)
}
