// SPDX-License-Identifier: MIT OR Apache-2.0

//! Distances between a natural representation set and an intervened one.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{min_cost_matching, pca, sinkhorn_divergence, PcaBasis};
use crate::par;

pub const EMD_BLUR: f64 = 0.05;
pub const EMD_P: i32 = 2;

/// Optimal-transport divergence over all coordinates.
pub fn emd_divergence(natural: &[DVector<f64>], compared: &[DVector<f64>]) -> Result<f64> {
    sinkhorn_divergence(natural, compared, EMD_BLUR, EMD_P)
}

pub fn restrict(points: &[DVector<f64>], dims: &[usize]) -> Result<Vec<DVector<f64>>> {
    points
        .iter()
        .map(|p| {
            if let Some(&bad) = dims.iter().find(|&&i| i >= p.len()) {
                return Err(Error::DimensionMismatch { expected: p.len(), got: bad + 1, context: "restricted coordinate" });
            }
            Ok(DVector::from_iterator(dims.len(), dims.iter().map(|&i| p[i])))
        })
        .collect()
}

/// EMD over the coordinates `dims` only, divided by `scale` when positive.
pub fn row_emd(natural: &[DVector<f64>], compared: &[DVector<f64>], dims: &[usize], scale: usize) -> Result<f64> {
    if dims.is_empty() {
        return Err(Error::EmptyInput("row EMD coordinates"));
    }
    let value = emd_divergence(&restrict(natural, dims)?, &restrict(compared, dims)?)?;
    Ok(if scale > 0 { value / scale as f64 } else { value })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `1 − cos(x, y)`.
    Cosine,
    L2,
}

pub fn distance(metric: Metric, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    check_dim(x.len(), y.len(), "distance operand")?;
    match metric {
        Metric::L2 => Ok((x - y).norm()),
        Metric::Cosine => Ok(1.0 - crate::counterfactual::cosine(x, y)?),
    }
}

/// Mean over `queries` of the distance to the closest reference point.
pub fn nearest_distance(reference: &[DVector<f64>], queries: &[DVector<f64>], metric: Metric) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("nearest-distance reference"));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("nearest-distance queries"));
    }
    let mins = par::try_map_slice(queries, |q| {
        reference.iter().try_fold(f64::INFINITY, |best, r| Ok::<_, Error>(best.min(distance(metric, q, r)?)))
    })?;
    Ok(mins.iter().sum::<f64>() / queries.len() as f64)
}

/// Mean cost of the optimal one-to-one pairing of `a` with `b`.
pub fn min_cost_pairing_distance(a: &[DVector<f64>], b: &[DVector<f64>], metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len(), context: "pairing set size" });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("pairing sets"));
    }
    let rows = par::try_map_slice(a, |x| b.iter().map(|y| distance(metric, x, y)).collect::<Result<Vec<_>>>())?;
    let cost = DMatrix::from_fn(a.len(), b.len(), |i, j| rows[i][j]);
    let (_, total) = min_cost_matching(&cost);
    Ok(total / a.len() as f64)
}

/// Indices of the `k` nearest reference points to `v` in L2, closest first,
/// ties broken by index.
pub fn k_nearest(reference: &[DVector<f64>], v: &DVector<f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = reference.iter().enumerate().map(|(i, r)| ((r - v).norm_squared(), i)).collect();
    let k = k.min(order.len());
    if k < order.len() {
        order.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.truncate(k);
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, i)| i).collect()
}

fn check_reference(reference: &[DVector<f64>], v: &DVector<f64>) -> Result<()> {
    let first = reference.first().ok_or(Error::EmptyInput("reference set"))?;
    check_dim(first.len(), v.len(), "query vector")
}

/// Tangent basis of the `k`-neighbourhood of `reference[i]`.
fn local_basis(reference: &[DVector<f64>], i: usize, k: usize, var_threshold: f64) -> Result<PcaBasis> {
    let hood: Vec<DVector<f64>> = k_nearest(reference, &reference[i], k).into_iter().map(|j| reference[j].clone()).collect();
    Ok(pca(&hood, reference[i].len())?.truncate_to_variance(var_threshold))
}

fn local_pca_with(
    reference: &[DVector<f64>],
    v: &DVector<f64>,
    k: usize,
    var_threshold: f64,
    cache: &mut HashMap<usize, PcaBasis>,
) -> Result<f64> {
    let mut best = f64::INFINITY;
    for i in k_nearest(reference, v, k) {
        if !cache.contains_key(&i) {
            cache.insert(i, local_basis(reference, i, k, var_threshold)?);
        }
        let basis = &cache[&i];
        best = best.min(basis.residual(&(v - &reference[i])).norm());
    }
    Ok(best)
}

/// Smallest orthogonal residual of `v − xᵢ` against the local tangent space
/// at each of the `k` nearest reference points `xᵢ`.
pub fn local_pca_distance(reference: &[DVector<f64>], v: &DVector<f64>, k: usize, var_threshold: f64) -> Result<f64> {
    if k < 2 {
        return Err(Error::Config(format!("local PCA needs k >= 2, got {k}")));
    }
    check_reference(reference, v)?;
    local_pca_with(reference, v, k, var_threshold, &mut HashMap::new())
}

/// Distance from `v` to its best affine reconstruction from its `k`
/// nearest reference points, with Tikhonov-regularised weights.
pub fn llr_error(reference: &[DVector<f64>], v: &DVector<f64>, k: usize, tikhonov: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("LLR needs k >= 1".into()));
    }
    check_reference(reference, v)?;
    let hood = k_nearest(reference, v, k);
    // A neighbour equal to `v` reconstructs it exactly.
    if (&reference[hood[0]] - v).norm_squared() == 0.0 {
        return Ok(0.0);
    }
    let n = hood.len();
    let centered: Vec<DVector<f64>> = hood.iter().map(|&j| &reference[j] - v).collect();
    let gram = DMatrix::from_fn(n, n, |a, b| centered[a].dot(&centered[b])) + DMatrix::identity(n, n) * tikhonov;
    let w = gram
        .lu()
        .solve(&DVector::from_element(n, 1.0))
        .ok_or(Error::Singular("local Gram matrix"))?;
    let total = w.sum();
    if !total.is_finite() || total.abs() < f64::MIN_POSITIVE {
        return Err(Error::Singular("local reconstruction weights"));
    }
    let recon = hood.iter().zip(w.iter()).fold(DVector::zeros(v.len()), |acc, (&j, wj)| acc + &reference[j] * (wj / total));
    Ok((v - recon).norm())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Silverman's rule on the mean marginal standard deviation.
    Auto,
    Fixed(f64),
}

pub fn silverman_bandwidth(reference: &[DVector<f64>]) -> Result<f64> {
    let n = reference.len();
    if n < 2 {
        return Err(Error::Config("Silverman bandwidth needs at least two reference points".into()));
    }
    let d = reference[0].len();
    let mean = reference.iter().fold(DVector::zeros(d), |acc, r| acc + r) / n as f64;
    let var = reference.iter().fold(DVector::zeros(d), |acc, r| acc + (r - &mean).map(|x| x * x)) / (n - 1) as f64;
    let sigma = var.map(f64::sqrt).mean();
    let h = sigma * (4.0 / ((d as f64 + 2.0) * n as f64)).powf(1.0 / (d as f64 + 4.0));
    if !(h > 0.0) {
        return Err(Error::Config("reference set has zero spread".into()));
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeScore {
    /// `−log p̂(v)`, computed in log space so it stays finite.
    pub value: f64,
    /// `p̂(v)` itself is below the smallest positive double.
    pub underflow: bool,
    pub bandwidth: f64,
}

/// `−log((1/(n hᴰ)) Σ exp(−‖v − xᵢ‖²/(2h²)))`.
pub fn kde_neg_log_density(reference: &[DVector<f64>], v: &DVector<f64>, bandwidth: Bandwidth) -> Result<KdeScore> {
    check_reference(reference, v)?;
    let h = match bandwidth {
        Bandwidth::Auto => silverman_bandwidth(reference)?,
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => return Err(Error::Config(format!("bandwidth must be positive, got {h}"))),
    };
    let n = reference.len() as f64;
    let d = v.len() as f64;
    let exps: Vec<f64> = reference.iter().map(|r| -(r - v).norm_squared() / (2.0 * h * h)).collect();
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + exps.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
    let log_p = lse - n.ln() - d * h.ln();
    Ok(KdeScore { value: -log_p, underflow: log_p < f64::MIN_POSITIVE.ln(), bandwidth: h })
}

/// Natural set, intervened set and the natural counterpart each
/// intervention is meant to reproduce.
#[derive(Clone, Debug, Default)]
pub struct ComparisonSet {
    pub natural: Vec<DVector<f64>>,
    pub intervened: Vec<DVector<f64>>,
    pub ground_truth: Vec<DVector<f64>>,
}

impl ComparisonSet {
    pub fn validate(&self) -> Result<()> {
        if self.natural.is_empty() {
            return Err(Error::EmptyInput("natural set"));
        }
        if self.intervened.is_empty() {
            return Err(Error::EmptyInput("intervened set"));
        }
        if self.intervened.len() != self.ground_truth.len() {
            return Err(Error::DimensionMismatch {
                expected: self.intervened.len(),
                got: self.ground_truth.len(),
                context: "ground-truth pairs",
            });
        }
        let d = self.natural[0].len();
        for v in self.natural.iter().chain(&self.intervened).chain(&self.ground_truth) {
            check_dim(d, v.len(), "comparison vector")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivergenceParams {
    pub k: usize,
    pub var_threshold: f64,
    pub tikhonov: f64,
    pub bandwidth: Bandwidth,
    pub causal_dims: Vec<usize>,
    /// Row EMD is divided by this when positive.
    pub row_scale: usize,
}

impl Default for DivergenceParams {
    fn default() -> Self {
        Self { k: 10, var_threshold: 0.95, tikhonov: 1e-3, bandwidth: Bandwidth::Auto, causal_dims: vec![0, 1], row_scale: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub emd: f64,
    pub baseline_emd: f64,
    pub row_emd: f64,
    pub nearest_cos: f64,
    pub nearest_l2: f64,
    pub min_cos_pairing: f64,
    pub min_l2_pairing: f64,
    pub local_pca: f64,
    pub llr: f64,
    pub kde_neg_log: f64,
    pub kde_underflows: usize,
}

/// Every metric for one comparison. Pairings match intervened points with
/// their ground truth; the local metrics are averaged over intervened points.
pub fn full_report(cmp: &ComparisonSet, params: &DivergenceParams) -> Result<DivergenceReport> {
    cmp.validate()?;
    let n = cmp.intervened.len() as f64;
    let emd = emd_divergence(&cmp.natural, &cmp.intervened)?;
    let baseline_emd = emd_divergence(&cmp.natural, &cmp.ground_truth)?;
    let row = row_emd(&cmp.natural, &cmp.intervened, &params.causal_dims, params.row_scale)?;
    let nearest_cos = nearest_distance(&cmp.natural, &cmp.intervened, Metric::Cosine)?;
    let nearest_l2 = nearest_distance(&cmp.natural, &cmp.intervened, Metric::L2)?;
    let min_cos_pairing = min_cost_pairing_distance(&cmp.intervened, &cmp.ground_truth, Metric::Cosine)?;
    let min_l2_pairing = min_cost_pairing_distance(&cmp.intervened, &cmp.ground_truth, Metric::L2)?;

    if params.k < 2 {
        return Err(Error::Config(format!("local metrics need k >= 2, got {}", params.k)));
    }
    let bandwidth = match params.bandwidth {
        Bandwidth::Auto => Bandwidth::Fixed(silverman_bandwidth(&cmp.natural)?),
        fixed => fixed,
    };
    // Tangent bases are shared between queries through a per-chunk cache.
    let chunk = cmp.intervened.len().div_ceil(64).max(1);
    let chunks: Vec<&[DVector<f64>]> = cmp.intervened.chunks(chunk).collect();
    let partial = par::try_map_slice(&chunks, |points| {
        let mut cache = HashMap::new();
        let mut sums = (0.0, 0.0, 0.0, 0usize);
        for v in points.iter() {
            sums.0 += local_pca_with(&cmp.natural, v, params.k, params.var_threshold, &mut cache)?;
            sums.1 += llr_error(&cmp.natural, v, params.k, params.tikhonov)?;
            let kde = kde_neg_log_density(&cmp.natural, v, bandwidth)?;
            sums.2 += kde.value;
            sums.3 += kde.underflow as usize;
        }
        Ok::<_, Error>(sums)
    })?;
    let (local_pca, llr, kde, underflows) =
        partial.into_iter().fold((0.0, 0.0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3));

    let report = DivergenceReport {
        emd,
        baseline_emd,
        row_emd: row,
        nearest_cos,
        nearest_l2,
        min_cos_pairing,
        min_l2_pairing,
        local_pca: local_pca / n,
        llr: llr / n,
        kde_neg_log: kde / n,
        kde_underflows: underflows,
    };
    Ok(report)
}
