// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analytic gradients against central finite differences on fixed small
//! instances.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    das_loss, draw_samples, interchange, AlignTrainConfig, AlignmentFunction, ClLossKind, InterventionSample, Objective,
    VarId, VariableSelector, DEFAULT_RIDGE,
};
use crate::counterfactual::{cl_loss, cl_vector, cosine, ClIndex};
use crate::error::Result;
use crate::neural::{log_softmax, FrozenMlp, Mlp, MlpConfig};
use crate::numerics::{gaussian_matrix, Rng};
use crate::synthdata::{generate_dataset, split_partitions, DatasetConfig, Scheme, DEFAULT_TRAIN_FRACTION};

/// Finite-difference step used by every check.
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub name: String,
    pub parameters: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, worst tensor.
    pub relative_error: f64,
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn central<F: FnMut(f64) -> f64>(orig: f64, mut f: F) -> f64 {
    (f(orig + FD_STEP) - f(orig - FD_STEP)) / (2.0 * FD_STEP)
}

/// Cross-entropy parameter gradients of a Train-mode batch pass (d = 6,
/// width 8, 3 classes, dropout off, perturbed batchnorm).
pub fn mlp_gradient_check() -> Result<GradientCheck> {
    let mut rng = Rng::new(11);
    let config = MlpConfig { input_dim: 6, hidden_width: 8, n_classes: 3, dropout_p: 0.0, ..MlpConfig::default() };
    let mut m = Mlp::new(&config, &mut rng)?;
    for bn in [&mut m.bn_in, &mut m.bn_hidden] {
        let d = bn.dim();
        bn.gamma = rng.normal_vector(d, 1.0, 0.3);
        bn.beta = rng.normal_vector(d, 0.0, 0.3);
    }
    m.b1 = rng.normal_vector(8, 0.0, 0.3);
    m.b2 = rng.normal_vector(3, 0.0, 0.3);
    let x = gaussian_matrix(&mut rng, 6, 7, 0.3, 1.2);
    let labels = [0, 2, 1, 1, 0, 2, 2];
    let mask = DMatrix::from_element(8, 7, 1.0);
    let loss = |m: &Mlp| {
        let pass = m.train_pass(&x, &mask);
        labels
            .iter()
            .enumerate()
            .map(|(j, &l)| -log_softmax(&pass.logits.column(j).into_owned())[l])
            .sum::<f64>()
            / labels.len() as f64
    };
    let (_, grads) = m.backward(&m.train_pass(&x, &mask), &labels);
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = m.param_slices_mut()[k][i];
            *n = central(orig, |v| {
                m.param_slices_mut()[k][i] = v;
                loss(&m)
            });
            m.param_slices_mut()[k][i] = orig;
        }
        worst = worst.max(relative_error(a, &numeric));
        count += a.len();
    }
    Ok(GradientCheck { name: "mlp.parameters".into(), parameters: count, relative_error: worst })
}

struct AlignmentProblem {
    model: FrozenMlp,
    af: AlignmentFunction,
    samples: Vec<InterventionSample>,
    index: ClIndex,
    selectors: [VariableSelector; 3],
}

fn alignment_problem() -> Result<AlignmentProblem> {
    let data_cfg = DatasetConfig { samples_per_class: 40, extra_dims: 2, ..DatasetConfig::default() };
    let data = generate_dataset(&data_cfg)?;
    let grid = data_cfg.grid();
    let (p1, _) = split_partitions(&data, &grid, Scheme::Default, 0, DEFAULT_TRAIN_FRACTION)?;
    let mlp_cfg = MlpConfig { input_dim: 4, hidden_width: 8, ..MlpConfig::default() };
    let model = Mlp::new(&mlp_cfg, &mut Rng::new(3))?.frozen();
    let samples = draw_samples(&p1.train, &grid, VarId::X2, 8, &mut Rng::new(1), |c| p1.partition.contains(c))?;
    // A generic alignment rather than the near-identity init.
    let mut rng = Rng::new(12);
    let m = gaussian_matrix(&mut rng, 4, 4, 0.0, 0.5);
    let a = rng.normal_vector(4, 0.0, 1.0);
    let af = AlignmentFunction::new(m, a, DEFAULT_RIDGE)?;
    Ok(AlignmentProblem { model, af, samples, index: ClIndex::from_reps(&p1.train), selectors: VariableSelector::standard(4, 1)? })
}

/// `Σ_s L(s)/n` with every CL target projection taken through `frozen`.
fn reference_objective(p: &AlignmentProblem, af: &AlignmentFunction, frozen: &AlignmentFunction, config: &AlignTrainConfig) -> Result<f64> {
    let [x1, x2, _] = &p.selectors;
    let mut total = 0.0;
    if config.behavioral_weight > 0.0 {
        total += config.behavioral_weight * das_loss(&p.model, &p.samples, af, x2)?;
    }
    if config.cl_weight > 0.0 {
        let mut cl = 0.0;
        for s in &p.samples {
            let hat = interchange(af, x2, &s.h_trg, &s.h_src)?;
            let h_cl = cl_vector(&p.index, s.cl_key)?;
            cl += match config.cl_kind {
                ClLossKind::Plain => cl_loss(&hat, h_cl)?,
                ClLossKind::Modified => {
                    let mut sum = 0.0;
                    for sel in [x1, x2] {
                        let r = af.project_mask(&sel.mask(), &hat);
                        let t = frozen.project_mask(&sel.mask(), h_cl);
                        sum += 0.5 * (&r - &t).norm_squared() - 0.5 * cosine(&r, &t)?;
                    }
                    sum
                }
            };
        }
        total += config.cl_weight * cl / p.samples.len() as f64;
    }
    Ok(total)
}

fn alignment_check(name: &str, config: &AlignTrainConfig) -> Result<GradientCheck> {
    let p = alignment_problem()?;
    let objective = Objective::new(&p.model, config, &p.index, 4)?;
    let (_, grad_w, _) = objective.eval(&p.af, &p.samples, true)?;
    let (gm, ga) = p.af.backprop(&grad_w);
    let analytic_m: Vec<f64> = gm.iter().copied().collect();
    let analytic_a: Vec<f64> = ga.iter().copied().collect();

    let frozen = p.af.clone();
    let mut af = p.af.clone();
    let nm = analytic_m.len();
    let mut numeric = |k: usize| -> Result<f64> {
        let set = |af: &mut AlignmentFunction, v: f64| -> Result<f64> {
            let (m, a) = af.param_slices_mut();
            if k < nm {
                m[k] = v
            } else {
                a[k - nm] = v
            }
            af.commit()?;
            reference_objective(&p, af, &frozen, config)
        };
        let orig = if k < nm { af.m().as_slice()[k] } else { af.a()[k - nm] };
        let up = set(&mut af, orig + FD_STEP)?;
        let down = set(&mut af, orig - FD_STEP)?;
        set(&mut af, orig)?;
        Ok((up - down) / (2.0 * FD_STEP))
    };
    let num_m = (0..nm).map(&mut numeric).collect::<Result<Vec<_>>>()?;
    let num_a = (nm..nm + analytic_a.len()).map(&mut numeric).collect::<Result<Vec<_>>>()?;
    let worst = relative_error(&analytic_m, &num_m).max(relative_error(&analytic_a, &num_a));
    Ok(GradientCheck { name: name.into(), parameters: nm + analytic_a.len(), relative_error: worst })
}

/// Every gradient check: classifier parameters, and alignment parameters
/// under the behavioural loss, the plain CL loss and the per-subspace CL loss.
pub fn gradient_suite() -> Result<Vec<GradientCheck>> {
    let das = AlignTrainConfig { behavioral_weight: 1.0, cl_weight: 0.0, ..AlignTrainConfig::default() };
    let cl = AlignTrainConfig { behavioral_weight: 0.0, cl_weight: 1.0, cl_kind: ClLossKind::Plain, ..AlignTrainConfig::default() };
    let modified = AlignTrainConfig { cl_kind: ClLossKind::Modified, ..cl.clone() };
    Ok(vec![
        mlp_gradient_check()?,
        alignment_check("alignment.das", &das)?,
        alignment_check("alignment.cl", &cl)?,
        alignment_check("alignment.modified_cl", &modified)?,
    ])
}
