// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::circuit::PiecewiseLinearCircuit;
use crate::divergence::k_nearest;
use crate::error::{check_dim, Error, Result};
use crate::neural::Mlp;
use crate::numerics::pca;

/// A unit counts as active above this post-ReLU value.
pub const ACTIVE_THRESHOLD: f64 = 1e-9;

/// Coordinate `i` from `h_src` when `i ∈ s`, else from `h_trg`.
pub fn coordinate_patch(s: &BTreeSet<usize>, h_src: &DVector<f64>, h_trg: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(h_trg.len(), h_src.len(), "patch source")?;
    if let Some(&i) = s.iter().find(|&&i| i >= h_trg.len()) {
        return Err(Error::DimensionMismatch { expected: h_trg.len(), got: i + 1, context: "patch coordinate" });
    }
    Ok(DVector::from_fn(h_trg.len(), |i, _| if s.contains(&i) { h_src[i] } else { h_trg[i] }))
}

fn bits(v: &DVector<f64>) -> Vec<u64> {
    v.iter().map(|x| (x + 0.0).to_bits()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosureViolation {
    /// A point of `I₁ × ⋯ × I_d` missing from the set.
    pub witness: DVector<f64>,
    /// `sources[k]` is a member whose coordinate `k` equals `witness[k]`.
    pub sources: Vec<DVector<f64>>,
    /// `steps[0] = sources[0]`, `steps[k] = Patch_{k}(sources[k], steps[k−1])`.
    pub steps: Vec<DVector<f64>>,
    /// First `k` with `steps[k]` outside the set: patching coordinate `k` of
    /// member `sources[k]` into member `steps[k−1]` leaves the set.
    pub breaking_step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClosureResult {
    Closed,
    Violation(ClosureViolation),
}

/// Decide whether a finite set equals the product of its coordinate
/// projections, which is exactly when every coordinate patch stays inside.
pub fn patch_closure_check(points: &[DVector<f64>]) -> Result<ClosureResult> {
    let first = points.first().ok_or(Error::EmptyInput("patch-closure points"))?;
    let d = first.len();
    for p in points {
        check_dim(d, p.len(), "patch-closure point")?;
    }
    let members: BTreeSet<Vec<u64>> = points.iter().map(bits).collect();
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut vals: Vec<f64> = points.iter().map(|p| p[i] + 0.0).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup_by(|a, b| a.to_bits() == b.to_bits());
            vals
        })
        .collect();
    let product: u128 = axes.iter().map(|a| a.len() as u128).product();
    if product == members.len() as u128 {
        return Ok(ClosureResult::Closed);
    }
    // At most |members| product tuples are present, so counting through the
    // product in order meets a missing one quickly.
    let mut digits = vec![0usize; d];
    let witness = loop {
        let t = DVector::from_fn(d, |i, _| axes[i][digits[i]]);
        if !members.contains(&bits(&t)) {
            break t;
        }
        let mut k = 0;
        loop {
            digits[k] += 1;
            if digits[k] < axes[k].len() {
                break;
            }
            digits[k] = 0;
            k += 1;
        }
    };
    let sources: Vec<DVector<f64>> = (0..d)
        .map(|k| points.iter().find(|p| (p[k] + 0.0).to_bits() == witness[k].to_bits()).expect("value from projection").clone())
        .collect();
    let mut steps = vec![sources[0].clone()];
    for k in 1..d {
        let s = BTreeSet::from([k]);
        steps.push(coordinate_patch(&s, &sources[k], &steps[k - 1])?);
    }
    let breaking_step = steps.iter().position(|s| !members.contains(&bits(s))).expect("final step is the witness");
    Ok(ClosureResult::Violation(ClosureViolation { witness, sources, steps, breaking_step }))
}

pub fn mean_diff_vector(class_a: &[DVector<f64>], class_b: &[DVector<f64>]) -> Result<DVector<f64>> {
    let mean = |set: &[DVector<f64>], what| -> Result<DVector<f64>> {
        let first = set.first().ok_or(Error::EmptyInput(what))?;
        let mut sum = DVector::zeros(first.len());
        for v in set {
            check_dim(first.len(), v.len(), "mean-difference vector")?;
            sum += v;
        }
        Ok(sum / set.len() as f64)
    };
    let (a, b) = (mean(class_a, "class A")?, mean(class_b, "class B")?);
    check_dim(a.len(), b.len(), "mean-difference classes")?;
    Ok(a - b)
}

/// Networks whose ReLU units can be audited.
pub trait ReluNetwork {
    fn relu_units(&self) -> usize;
    fn relu_values(&self, h: &DVector<f64>) -> Result<Vec<f64>>;
}

impl ReluNetwork for PiecewiseLinearCircuit {
    fn relu_units(&self) -> usize {
        PiecewiseLinearCircuit::relu_units(self)
    }

    fn relu_values(&self, h: &DVector<f64>) -> Result<Vec<f64>> {
        PiecewiseLinearCircuit::relu_values(self, h)
    }
}

impl ReluNetwork for Mlp {
    fn relu_units(&self) -> usize {
        self.hidden_width()
    }

    /// Eval-mode hidden activations.
    fn relu_values(&self, h: &DVector<f64>) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), h.len(), "mlp input")?;
        Ok(self.forward_eval(h).hidden_post.iter().copied().collect())
    }
}

pub fn activity(net: &impl ReluNetwork, h: &DVector<f64>) -> Result<Vec<bool>> {
    Ok(net.relu_values(h)?.into_iter().map(|v| v > ACTIVE_THRESHOLD).collect())
}

/// Per-class activity of every ReLU unit over natural samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub n_units: usize,
    /// `by_class[c][s][u]`: unit `u` active on natural sample `s` of class `c`.
    pub by_class: BTreeMap<usize, Vec<Vec<bool>>>,
}

impl ActivationProfile {
    pub fn build(net: &impl ReluNetwork, natural_by_class: &BTreeMap<usize, Vec<DVector<f64>>>) -> Result<Self> {
        let mut by_class = BTreeMap::new();
        for (&class, samples) in natural_by_class {
            by_class.insert(class, samples.iter().map(|h| activity(net, h)).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self { n_units: net.relu_units(), by_class })
    }

    /// Units active on at least one natural sample of `class`.
    pub fn ever_active(&self, class: usize) -> Option<Vec<bool>> {
        let rows = self.by_class.get(&class)?;
        Some((0..self.n_units).map(|u| rows.iter().any(|r| r[u])).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFlags {
    pub index: usize,
    pub intended_class: usize,
    /// Units active here but silent on every natural sample of the class.
    pub hidden_units: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenPathwayReport {
    pub n_units: usize,
    /// For each unit, the intervened samples that recruit it as a hidden pathway.
    pub per_unit: Vec<Vec<usize>>,
    pub per_sample: Vec<SampleFlags>,
}

impl HiddenPathwayReport {
    pub fn flagged_units(&self) -> Vec<usize> {
        (0..self.n_units).filter(|&u| !self.per_unit[u].is_empty()).collect()
    }
}

/// Flag ReLU units that an intervened sample switches on although no
/// natural sample of its intended class ever does.
pub fn relu_pattern_audit(
    net: &impl ReluNetwork,
    natural_by_class: &BTreeMap<usize, Vec<DVector<f64>>>,
    intervened: &[(DVector<f64>, usize)],
) -> Result<HiddenPathwayReport> {
    let profile = ActivationProfile::build(net, natural_by_class)?;
    let mut per_unit = vec![Vec::new(); profile.n_units];
    let mut per_sample = Vec::with_capacity(intervened.len());
    for (index, (h, class)) in intervened.iter().enumerate() {
        let natural = profile.ever_active(*class).filter(|_| !natural_by_class[class].is_empty()).ok_or(Error::MissingClass(*class))?;
        let active = activity(net, h)?;
        let hidden_units: Vec<usize> = (0..profile.n_units).filter(|&u| active[u] && !natural[u]).collect();
        for &u in &hidden_units {
            per_unit[u].push(index);
        }
        per_sample.push(SampleFlags { index, intended_class: *class, hidden_units });
    }
    Ok(HiddenPathwayReport { n_units: profile.n_units, per_unit, per_sample })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    ConvexHull,
    LocalPca { k: usize, var_threshold: f64 },
}

pub const HULL_TOLERANCE: f64 = 1e-8;
pub const HULL_MAX_ITERATIONS: usize = 10_000;
pub const HULL_MAX_POINTS: usize = 10_000;

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(y: &DVector<f64>) -> DVector<f64> {
    let mut sorted: Vec<f64> = y.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    y.map(|v| (v - theta).max(0.0))
}

/// Simplex weights `w` minimising `‖Σ wⱼ pⱼ − v‖` by accelerated projected
/// gradient.
pub fn convex_hull_weights(points: &[DVector<f64>], v: &DVector<f64>) -> Result<DVector<f64>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::EmptyInput("class points"));
    }
    if n > HULL_MAX_POINTS {
        return Err(Error::Config(format!("convex-hull projection is limited to {HULL_MAX_POINTS} points")));
    }
    for p in points {
        check_dim(v.len(), p.len(), "class point")?;
    }
    let combine = |w: &DVector<f64>| points.iter().zip(w.iter()).fold(DVector::zeros(v.len()), |acc, (p, wj)| acc + p * *wj);
    // Centering by v leaves the objective unchanged and keeps the Gram small.
    let centered: Vec<DVector<f64>> = points.iter().map(|p| p - v).collect();
    let lipschitz = centered.iter().map(|c| c.norm_squared()).sum::<f64>().max(f64::MIN_POSITIVE);
    let step = 1.0 / lipschitz;
    // Start from the nearest point.
    let nearest = k_nearest(points, v, 1)[0];
    let mut w = DVector::from_fn(n, |j, _| if j == nearest { 1.0 } else { 0.0 });
    let mut y = w.clone();
    let mut t = 1.0f64;
    for _ in 0..HULL_MAX_ITERATIONS {
        let residual = combine(&y) - v;
        let grad = DVector::from_fn(n, |j, _| centered[j].dot(&residual));
        let next = project_to_simplex(&(&y - grad * step));
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &next + (&next - &w) * ((t - 1.0) / t_next);
        let change = (&next - &w).amax();
        w = next;
        t = t_next;
        if change < HULL_TOLERANCE {
            break;
        }
    }
    Ok(polish(points, v, w))
}

/// Re-solve the equality-constrained least squares on the support of `w`
/// exactly and keep the result when it is feasible and no worse.
fn polish(points: &[DVector<f64>], v: &DVector<f64>, w: DVector<f64>) -> DVector<f64> {
    let support: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 1e-10).collect();
    let m = support.len();
    let mut kkt = DMatrix::zeros(m + 1, m + 1);
    let mut rhs = DVector::zeros(m + 1);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            kkt[(a, b)] = points[i].dot(&points[j]);
        }
        kkt[(a, m)] = 1.0;
        kkt[(m, a)] = 1.0;
        rhs[a] = points[i].dot(v);
    }
    rhs[m] = 1.0;
    let Ok(solution) = kkt.svd(true, true).solve(&rhs, 1e-12) else { return w };
    if solution.rows(0, m).iter().any(|x| *x < 0.0) {
        return w;
    }
    let mut exact = DVector::zeros(w.len());
    for (a, &j) in support.iter().enumerate() {
        exact[j] = solution[a];
    }
    let residual = |w: &DVector<f64>| {
        (points.iter().zip(w.iter()).fold(DVector::zeros(v.len()), |acc, (p, wj)| acc + p * *wj) - v).norm()
    };
    if residual(&exact) <= residual(&w) + 1e-12 {
        exact
    } else {
        w
    }
}

/// Nearest point of the class region: its convex hull, or the local PCA
/// plane through the `k` class points nearest `v`.
pub fn project_to_class_region(class_points: &[DVector<f64>], v: &DVector<f64>, mode: ProjectionMode) -> Result<DVector<f64>> {
    if class_points.is_empty() {
        return Err(Error::EmptyInput("class points"));
    }
    match mode {
        ProjectionMode::ConvexHull => {
            let w = convex_hull_weights(class_points, v)?;
            Ok(class_points.iter().zip(w.iter()).fold(DVector::zeros(v.len()), |acc, (p, wj)| acc + p * *wj))
        }
        ProjectionMode::LocalPca { k, var_threshold } => {
            for p in class_points {
                check_dim(v.len(), p.len(), "class point")?;
            }
            let hood: Vec<DVector<f64>> = k_nearest(class_points, v, k.max(1)).into_iter().map(|j| class_points[j].clone()).collect();
            let basis = pca(&hood, v.len())?.truncate_to_variance(var_threshold);
            Ok(basis.project(v))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextOutcome {
    pub context: usize,
    pub base_class: usize,
    pub shifted_class: usize,
    pub score_change: Option<f64>,
    pub changed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DormantScan {
    pub outcomes: Vec<ContextOutcome>,
    pub null_contexts: Vec<usize>,
    pub changed_contexts: Vec<usize>,
}

impl DormantScan {
    /// The divergence is a dormant change relative to `subset` when it is
    /// null on every context of `subset` yet changes behaviour elsewhere.
    pub fn is_dormant(&self, subset: &[usize]) -> bool {
        subset.iter().all(|c| self.null_contexts.contains(c)) && self.changed_contexts.iter().any(|c| !subset.contains(c))
    }
}

/// Compare the readout of `base_input` with that of `base_input + divergence`
/// under each context. A change is a different class, or a score moving by
/// more than `epsilon`.
pub fn dormant_change_scan(
    c: &PiecewiseLinearCircuit,
    base_input: &DVector<f64>,
    divergence: &DVector<f64>,
    contexts: &[DVector<f64>],
    epsilon: f64,
) -> Result<DormantScan> {
    check_dim(base_input.len(), divergence.len(), "divergence vector")?;
    if contexts.is_empty() {
        return Err(Error::EmptyInput("dormant-scan contexts"));
    }
    let shifted = base_input + divergence;
    let mut scan = DormantScan { outcomes: Vec::new(), null_contexts: Vec::new(), changed_contexts: Vec::new() };
    for (i, ctx) in contexts.iter().enumerate() {
        let (_, base) = c.forward(base_input, Some(ctx))?;
        let (_, moved) = c.forward(&shifted, Some(ctx))?;
        let score_change = base.score.zip(moved.score).map(|(a, b)| b - a);
        let changed = base.class != moved.class || score_change.is_some_and(|d| d.abs() > epsilon);
        if changed {
            scan.changed_contexts.push(i);
        } else {
            scan.null_contexts.push(i);
        }
        scan.outcomes.push(ContextOutcome { context: i, base_class: base.class, shifted_class: moved.class, score_change, changed });
    }
    Ok(scan)
}
