// SPDX-License-Identifier: MIT OR Apache-2.0

//! Debiased entropic optimal transport between uniform point clouds.
//!
//! `S_ε(a, b) = OT_ε(a, b) − ½ OT_ε(a, a) − ½ OT_ε(b, b)` with ground cost
//! `‖x − y‖ᵖ / p` and `ε = blurᵖ`. Potentials are updated symmetrically in the
//! log domain while ε is annealed from the cloud diameter down to the blur
//! scale, then iterated at the target ε until the transport plans satisfy
//! their marginals.

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::par;

const OVER_RELAXATION: f64 = 1.8;
const STATIONARY_WINDOW: usize = 10;

/// Solver settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub blur: f64,
    pub p: i32,
    /// Geometric factor between successive blur scales while annealing.
    pub scaling: f64,
    /// Cap on the total number of potential updates.
    pub max_iterations: usize,
    /// Largest absolute marginal violation at which iteration stops.
    pub tolerance: f64,
    /// Iteration also stops once the dual objective is estimated to lie
    /// within this relative distance of its limit. Needed in high dimension,
    /// where ε is tiny next to the cost scale and the marginals tighten far
    /// more slowly than the objective settles.
    pub objective_tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            blur: 0.05,
            p: 2,
            scaling: 0.5,
            max_iterations: 5000,
            tolerance: 1e-6,
            objective_tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornOutcome {
    pub divergence: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Dense point cloud with row-major storage.
struct Cloud {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Cloud {
    fn from_points(points: &[DVector<f64>], dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            check_dim(dim, p.len(), "sinkhorn point")?;
            data.extend(p.iter());
        }
        Ok(Self {
            n: points.len(),
            dim,
            data,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Cost matrix `C[i][j] = ‖x_i − y_j‖ᵖ / p`, row-major.
struct Cost {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Cost {
    fn new(x: &Cloud, y: &Cloud, p: i32) -> Self {
        let rows = par::map_range(x.n, |i| {
            let xi = x.row(i);
            (0..y.n)
                .map(|j| {
                    let sq: f64 = xi.iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    if p == 2 {
                        0.5 * sq
                    } else {
                        sq.sqrt().powi(p) / p as f64
                    }
                })
                .collect::<Vec<_>>()
        });
        Self {
            rows: x.n,
            cols: y.n,
            data: rows.concat(),
        }
    }

    fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `−ε log Σ_j exp(log w_j + (h_j − C_ij)/ε)` for every row `i`.
fn softmin(eps: f64, cost: &Cost, log_w: f64, h: &[f64]) -> Vec<f64> {
    par::map_range(cost.rows, |i| {
        let row = cost.row(i);
        let lse = log_sum_exp(row.iter().zip(h).map(|(c, hj)| (hj - c) / eps));
        -eps * (log_w + lse)
    })
}

/// Largest absolute violation of the row marginal when the row potential
/// `f` is compared against its exact update `f_next`: row `i` of the plan sums
/// to `w_i · exp((f_i − f_next_i)/ε)`.
fn row_residual(eps: f64, log_w: f64, f: &[f64], f_next: &[f64]) -> f64 {
    let w = log_w.exp();
    f.iter()
        .zip(f_next)
        .map(|(a, b)| w * (((a - b) / eps).exp() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn averaged(old: &mut [f64], new: &[f64]) {
    for (o, n) in old.iter_mut().zip(new) {
        *o = 0.5 * (*o + n);
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn epsilon_schedule(p: i32, diameter: f64, blur: f64, scaling: f64) -> Vec<f64> {
    let p = p as f64;
    let mut schedule = vec![diameter.powf(p)];
    let start = p * diameter.ln();
    let stop = p * blur.ln();
    let step = p * scaling.ln();
    let mut e = start;
    while e > stop {
        schedule.push(e.exp());
        e += step;
    }
    schedule.push(blur.powf(p));
    schedule
}

fn diameter(x: &Cloud, y: &Cloud) -> f64 {
    let mut lo = vec![f64::INFINITY; x.dim];
    let mut hi = vec![f64::NEG_INFINITY; x.dim];
    for cloud in [x, y] {
        for i in 0..cloud.n {
            for (k, v) in cloud.row(i).iter().enumerate() {
                lo[k] = lo[k].min(*v);
                hi[k] = hi[k].max(*v);
            }
        }
    }
    lo.iter()
        .zip(&hi)
        .map(|(l, h)| (h - l) * (h - l))
        .sum::<f64>()
        .sqrt()
}

/// Whether the objective sequence is within `tol` of its limit. Increments
/// one window apart must shrink at a steady geometric rate over three
/// windows before their tail sum is trusted as the remaining distance;
/// anything else must stop moving across two whole windows.
fn settled(history: &[f64], tol: f64) -> bool {
    let w = STATIONARY_WINDOW;
    let k = history.len();
    if k < 2 * w + 2 {
        return false;
    }
    let step = |j: usize| history[j] - history[j - 1];
    let (d0, d1, d2) = (step(k - 1), step(k - 1 - w), step(k - 1 - 2 * w));
    if d0 == 0.0 && d1 == 0.0 {
        return true;
    }
    let same_sign = d0.signum() == d1.signum() && d1.signum() == d2.signum();
    if same_sign && d0.abs() < d1.abs() && d1.abs() < d2.abs() {
        let (r_now, r_then) = (d0 / d1, d1 / d2);
        if (r_now / r_then - 1.0).abs() <= 0.25 {
            let ratio = r_now.max(r_then).powf(1.0 / w as f64);
            return d0.abs() * ratio / (1.0 - ratio) <= tol;
        }
    }
    history[k - 1 - 2 * w..].iter().all(|v| (v - history[k - 1]).abs() <= tol)
}

/// Debiased Sinkhorn divergence with explicit solver settings.
pub fn sinkhorn_divergence_with(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
    config: &SinkhornConfig,
) -> Result<SinkhornOutcome> {
    let first = a.first().ok_or(Error::EmptyInput("sinkhorn: first cloud"))?;
    if b.is_empty() {
        return Err(Error::EmptyInput("sinkhorn: second cloud"));
    }
    if !(config.blur > 0.0) || config.p < 1 {
        return Err(Error::Config(format!(
            "sinkhorn needs blur > 0 and p >= 1 (blur={}, p={})",
            config.blur, config.p
        )));
    }
    let dim = first.len();
    let x = Cloud::from_points(a, dim)?;
    let y = Cloud::from_points(b, dim)?;
    let log_a = -(x.n as f64).ln();
    let log_b = -(y.n as f64).ln();

    let c_xy = Cost::new(&x, &y, config.p);
    let c_yx = c_xy.transpose();
    let c_xx = Cost::new(&x, &x, config.p);
    let c_yy = Cost::new(&y, &y, config.p);

    let diam = diameter(&x, &y).max(config.blur);
    let schedule = epsilon_schedule(config.p, diam, config.blur, config.scaling);

    let eps0 = schedule[0];
    let zeros_x = vec![0.0; x.n];
    let zeros_y = vec![0.0; y.n];
    let mut f = softmin(eps0, &c_xy, log_b, &zeros_y);
    let mut g = softmin(eps0, &c_yx, log_a, &zeros_x);
    let mut f_aa = softmin(eps0, &c_xx, log_a, &zeros_x);
    let mut g_bb = softmin(eps0, &c_yy, log_b, &zeros_y);

    let mut iterations = 0;
    for &eps in &schedule {
        let ft = softmin(eps, &c_xy, log_b, &g);
        let gt = softmin(eps, &c_yx, log_a, &f);
        let faa = softmin(eps, &c_xx, log_a, &f_aa);
        let gbb = softmin(eps, &c_yy, log_b, &g_bb);
        averaged(&mut f, &ft);
        averaged(&mut g, &gt);
        averaged(&mut f_aa, &faa);
        averaged(&mut g_bb, &gbb);
        iterations += 1;
    }

    // Target scale: over-relaxed alternating updates for the cross term,
    // damped symmetric updates for the two self terms.
    let eps = *schedule.last().expect("nonempty schedule");
    let objective = |f: &[f64], g: &[f64], f_aa: &[f64], g_bb: &[f64]| {
        (mean(f) - mean(f_aa)) + (mean(g) - mean(g_bb))
    };
    let mut history: Vec<f64> = Vec::new();
    let residual = loop {
        let f_next = softmin(eps, &c_xy, log_b, &g);
        let faa_next = softmin(eps, &c_xx, log_a, &f_aa);
        let gbb_next = softmin(eps, &c_yy, log_b, &g_bb);
        let residual = row_residual(eps, log_a, &f, &f_next)
            .max(row_residual(eps, log_a, &f_aa, &faa_next))
            .max(row_residual(eps, log_b, &g_bb, &gbb_next));
        let value = objective(&f, &g, &f_aa, &g_bb);
        history.push(value);
        if residual < config.tolerance {
            break residual;
        }
        if settled(&history, config.objective_tolerance * value.abs().max(1.0)) {
            break residual;
        }
        if iterations >= config.max_iterations {
            return Err(Error::Convergence {
                iterations,
                residual,
            });
        }
        for (fi, ni) in f.iter_mut().zip(&f_next) {
            *fi = (1.0 - OVER_RELAXATION) * *fi + OVER_RELAXATION * ni;
        }
        let g_next = softmin(eps, &c_yx, log_a, &f);
        for (gi, ni) in g.iter_mut().zip(&g_next) {
            *gi = (1.0 - OVER_RELAXATION) * *gi + OVER_RELAXATION * ni;
        }
        averaged(&mut f_aa, &faa_next);
        averaged(&mut g_bb, &gbb_next);
        iterations += 1;
    };

    let divergence = objective(&f, &g, &f_aa, &g_bb);
    Ok(SinkhornOutcome {
        divergence,
        iterations,
        residual,
    })
}

/// Debiased Sinkhorn divergence at the given blur and exponent.
pub fn sinkhorn_divergence(a: &[DVector<f64>], b: &[DVector<f64>], blur: f64, p: i32) -> Result<f64> {
    let config = SinkhornConfig {
        blur,
        p,
        ..SinkhornConfig::default()
    };
    sinkhorn_divergence_with(a, b, &config).map(|o| o.divergence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn cloud(rng: &mut Rng, n: usize, d: usize, shift: f64) -> Vec<DVector<f64>> {
        (0..n).map(|_| rng.normal_vector(d, shift, 0.3)).collect()
    }

    #[test]
    fn self_divergence_vanishes() {
        let mut rng = Rng::new(1);
        let a = cloud(&mut rng, 40, 3, 0.0);
        let s = sinkhorn_divergence(&a, &a, 0.05, 2).unwrap();
        assert!(s.abs() <= 1e-6, "{s}");
    }

    #[test]
    fn singleton_closed_form() {
        let s = sinkhorn_divergence(&[v(&[0.0, 0.0])], &[v(&[3.0, 4.0])], 0.05, 2).unwrap();
        assert!((s - 12.5).abs() < 1e-3, "{s}");
    }

    #[test]
    fn two_point_translation() {
        // The 2x2 transport LP has two vertex couplings: the identity
        // (cost ½·½ + ½·½ = 0.5) and the swap (cost ½·1 + ½·1 = 1.0).
        let a = vec![v(&[0.0, 0.0]), v(&[1.0, 0.0])];
        let b = vec![v(&[0.0, 1.0]), v(&[1.0, 1.0])];
        let identity = 0.5 * (0.5 * 1.0) + 0.5 * (0.5 * 1.0);
        let swap = 0.5 * (0.5 * 2.0) + 0.5 * (0.5 * 2.0);
        let exact = f64::min(identity, swap);
        let s = sinkhorn_divergence(&a, &b, 0.05, 2).unwrap();
        assert!((s - exact).abs() < 2e-2, "{s} vs {exact}");
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let mut rng = Rng::new(2);
        let a = cloud(&mut rng, 30, 2, 0.0);
        let b = cloud(&mut rng, 25, 2, 0.4);
        let ab = sinkhorn_divergence(&a, &b, 0.05, 2).unwrap();
        let ba = sinkhorn_divergence(&b, &a, 0.05, 2).unwrap();
        assert!(ab >= -1e-9);
        assert!((ab - ba).abs() < 1e-6, "{ab} {ba}");
    }

    #[test]
    fn early_stop_tracks_tight_solve() {
        // An over-relaxed run whose objective stalls briefly well before
        // convergence.
        let mut rng = Rng::new(783285580762406019);
        let a: Vec<_> = (0..7).map(|_| rng.normal_vector(3, 0.0, 1.0)).collect();
        let b: Vec<_> = (0..10).map(|_| rng.normal_vector(3, 0.5, 1.0)).collect();
        let tight = SinkhornConfig {
            objective_tolerance: 0.0,
            max_iterations: 100_000,
            ..SinkhornConfig::default()
        };
        let reference = sinkhorn_divergence_with(&a, &b, &tight).unwrap();
        assert!(reference.residual < 1e-6);
        for (x, y) in [(&a, &b), (&b, &a)] {
            let fast = sinkhorn_divergence_with(x, y, &SinkhornConfig::default()).unwrap();
            assert!((fast.divergence - reference.divergence).abs() < 1e-5, "{fast:?} vs {reference:?}");
        }
    }

    #[test]
    fn empty_cloud_errors() {
        assert!(sinkhorn_divergence(&[], &[v(&[1.0])], 0.05, 2).is_err());
    }

    #[test]
    fn tiny_budget_reports_residual() {
        let mut rng = Rng::new(3);
        let a = cloud(&mut rng, 30, 2, 0.0);
        let b = cloud(&mut rng, 30, 2, 1.0);
        let cfg = SinkhornConfig {
            max_iterations: 1,
            ..SinkhornConfig::default()
        };
        match sinkhorn_divergence_with(&a, &b, &cfg) {
            Err(Error::Convergence { residual, .. }) => assert!(residual > 0.0),
            other => panic!("expected convergence error, got {other:?}"),
        }
    }
}
