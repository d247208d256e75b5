// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::synthdata::{ClassGrid, LabeledRep};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarId {
    X1,
    X2,
    Extra,
}

/// Contiguous block of aligned coordinates assigned to one variable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSelector {
    pub var: VarId,
    pub start: usize,
    pub len: usize,
    pub dim: usize,
}

impl VariableSelector {
    pub fn new(var: VarId, start: usize, len: usize, dim: usize) -> Result<Self> {
        if start + len > dim {
            return Err(Error::Config(format!("selector {start}..{} exceeds dimension {dim}", start + len)));
        }
        Ok(Self { var, start, len, dim })
    }

    /// `x1` then `x2`, each `subspace_size` wide, and `extra` for the rest.
    pub fn standard(dim: usize, subspace_size: usize) -> Result<[Self; 3]> {
        if subspace_size == 0 || 2 * subspace_size > dim {
            return Err(Error::Config(format!(
                "subspace size {subspace_size} does not fit two variables in dimension {dim}"
            )));
        }
        let k = subspace_size;
        Ok([
            Self::new(VarId::X1, 0, k, dim)?,
            Self::new(VarId::X2, k, k, dim)?,
            Self::new(VarId::Extra, 2 * k, dim - 2 * k, dim)?,
        ])
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }

    pub fn mask(&self) -> DVector<f64> {
        DVector::from_fn(self.dim, |i, _| if self.indices().contains(&i) { 1.0 } else { 0.0 })
    }

    pub fn overlaps(&self, other: &Self) -> bool {
        self.start < other.start + other.len && other.start < self.start + self.len
    }
}

/// Elementwise union of selector masks.
pub fn combined_mask(selectors: &[&VariableSelector]) -> Result<DVector<f64>> {
    let dim = selectors.first().map_or(0, |s| s.dim);
    let mut mask = DVector::zeros(dim);
    for (i, s) in selectors.iter().enumerate() {
        if s.dim != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: s.dim, context: "selector dimension" });
        }
        if selectors[..i].iter().any(|o| o.overlaps(s)) {
            return Err(Error::Config("selectors overlap".into()));
        }
        mask += s.mask();
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterventionSample {
    pub h_src: DVector<f64>,
    pub h_trg: DVector<f64>,
    pub variable: VarId,
    pub counterfactual_label: usize,
    /// Post-intervention `(x1, x2)`.
    pub cl_key: (f64, f64),
}

/// Value pair after copying `variable` from `src` into `trg`.
pub fn counterfactual_key(variable: VarId, trg: &LabeledRep, src: &LabeledRep) -> (f64, f64) {
    match variable {
        VarId::X1 => (src.x1, trg.x2),
        VarId::X2 => (trg.x1, src.x2),
        VarId::Extra => (trg.x1, trg.x2),
    }
}

pub fn make_sample(grid: &ClassGrid, variable: VarId, trg: &LabeledRep, src: &LabeledRep) -> Result<InterventionSample> {
    let cl_key = counterfactual_key(variable, trg, src);
    let label = grid
        .class_of(cl_key.0, cl_key.1)
        .ok_or_else(|| Error::Config(format!("({}, {}) is not a grid point", cl_key.0, cl_key.1)))?;
    Ok(InterventionSample {
        h_src: src.h.clone(),
        h_trg: trg.h.clone(),
        variable,
        counterfactual_label: label,
        cl_key,
    })
}

/// Draw `n` target/source pairs uniformly from `pool`, keeping only pairs
/// whose counterfactual class passes `accept`.
pub fn draw_samples(
    pool: &[LabeledRep],
    grid: &ClassGrid,
    variable: VarId,
    n: usize,
    rng: &mut Rng,
    accept: impl Fn(usize) -> bool,
) -> Result<Vec<InterventionSample>> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("intervention sample pool"));
    }
    // Reject early if no pair can ever be accepted.
    let classes: std::collections::BTreeMap<usize, &LabeledRep> = pool.iter().map(|r| (r.class_label, r)).collect();
    let feasible = classes.values().any(|t| {
        classes.values().any(|s| {
            let key = counterfactual_key(variable, t, s);
            grid.class_of(key.0, key.1).is_some_and(&accept)
        })
    });
    if !feasible {
        return Err(Error::Partition("no target/source pair yields an accepted counterfactual class".into()));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let trg = &pool[rng.below(pool.len())];
        let src = &pool[rng.below(pool.len())];
        let sample = make_sample(grid, variable, trg, src)?;
        if accept(sample.counterfactual_label) {
            out.push(sample);
        }
    }
    Ok(out)
}

/// Draw exactly `per_class` pairs for every counterfactual class that passes
/// `accept` and is reachable from `pool`, in increasing class order. The
/// classes of the result are then balanced like a stratified natural split.
pub fn draw_balanced_samples(
    pool: &[LabeledRep],
    grid: &ClassGrid,
    variable: VarId,
    per_class: usize,
    rng: &mut Rng,
    accept: impl Fn(usize) -> bool,
) -> Result<Vec<InterventionSample>> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<&LabeledRep>> = Default::default();
    for r in pool {
        by_class.entry(r.class_label).or_default().push(r);
    }
    // Class pairs that produce each accepted counterfactual class.
    let mut routes: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
    for (&ct, ts) in &by_class {
        for (&cs, ss) in &by_class {
            let key = counterfactual_key(variable, ts[0], ss[0]);
            if let Some(label) = grid.class_of(key.0, key.1).filter(|l| accept(*l)) {
                routes.entry(label).or_default().push((ct, cs));
            }
        }
    }
    if routes.is_empty() {
        return Err(Error::Partition("no target/source pair yields an accepted counterfactual class".into()));
    }
    let mut out = Vec::with_capacity(routes.len() * per_class);
    for pairs in routes.values() {
        // Weight each class pair by how many sample pairs it holds, so the
        // draw is uniform over sample pairs with this counterfactual class.
        let weights: Vec<usize> = pairs.iter().map(|(ct, cs)| by_class[ct].len() * by_class[cs].len()).collect();
        let total: usize = weights.iter().sum();
        for _ in 0..per_class {
            let mut pick = rng.below(total);
            let mut k = 0;
            while pick >= weights[k] {
                pick -= weights[k];
                k += 1;
            }
            let (ts, ss) = (&by_class[&pairs[k].0], &by_class[&pairs[k].1]);
            let trg = ts[rng.below(ts.len())];
            let src = ss[rng.below(ss.len())];
            out.push(make_sample(grid, variable, trg, src)?);
        }
    }
    Ok(out)
}
