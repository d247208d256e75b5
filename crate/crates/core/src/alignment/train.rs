// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::function::AlignmentFunction;
use super::loss::{interchange_backward, interchange_forward};
use super::selector::{draw_balanced_samples, draw_samples, InterventionSample, VarId, VariableSelector};
use crate::counterfactual::{cl_loss_grad, cl_vector, modified_cl_loss_grad, ClIndex, ZeroNormPolicy};
use crate::divergence::row_emd;
use crate::error::{Error, Result};
use crate::neural::{argmax, FrozenMlp, Mlp};
use crate::numerics::Rng;
use crate::optim::Adam;
use crate::synthdata::{ClassGrid, LabeledRep, Partition, FEATURE_DIMS};

const VALID_STREAM: u64 = 0x7661_6c69_64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMetric {
    BestIia,
    BestEmd,
}

/// Which counterfactual-latent objective to add.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClLossKind {
    /// Loss on the whole intervened vector.
    Plain,
    /// Sum of per-subspace losses on the causal variables, target held fixed.
    Modified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignTrainConfig {
    pub learning_rate: f64,
    pub behavioral_weight: f64,
    pub cl_weight: f64,
    pub cl_kind: ClLossKind,
    pub variable: VarId,
    pub subspace_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub samples_per_epoch: usize,
    /// Evaluate the selection metric every this many epochs.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            behavioral_weight: 1.0,
            cl_weight: 0.0,
            cl_kind: ClLossKind::Modified,
            variable: VarId::X2,
            subspace_size: 1,
            max_epochs: 1000,
            patience: 400,
            batch_size: 64,
            samples_per_epoch: 2048,
            eval_every: 5,
            eval_samples: 256,
            seed: 0,
            selection_metric: SelectionMetric::BestIia,
        }
    }
}

impl AlignTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.behavioral_weight >= 0.0 && self.cl_weight >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.behavioral_weight == 0.0 && self.cl_weight == 0.0 {
            return Err(Error::Config("at least one of behavioral_weight and cl_weight must be positive".into()));
        }
        if self.variable == VarId::Extra {
            return Err(Error::Config("the intervened variable must be x1 or x2".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.samples_per_epoch == 0 {
            return Err(Error::Config("learning rate, batch size and samples per epoch must be positive".into()));
        }
        if self.eval_every == 0 || self.eval_samples == 0 {
            return Err(Error::Config("eval_every and eval_samples must be positive".into()));
        }
        Ok(())
    }

    /// The subspace that training intervenes on.
    pub fn intervened_selector(&self, dim: usize) -> Result<VariableSelector> {
        let [x1, x2, _] = VariableSelector::standard(dim, self.subspace_size)?;
        Ok(if self.variable == VarId::X1 { x1 } else { x2 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub valid_iia: Option<f64>,
    pub valid_row_emd: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignHistory {
    pub epochs: Vec<AlignEpoch>,
    pub best_epoch: Option<usize>,
    /// Cosine terms skipped because a projected vector had zero norm.
    pub dropped_cosines: usize,
}

/// Training and validation samples of the partition the alignment is fit on.
#[derive(Clone, Copy, Debug)]
pub struct AlignData<'a> {
    pub train: &'a [LabeledRep],
    pub valid: &'a [LabeledRep],
    pub partition: &'a Partition,
    pub grid: &'a ClassGrid,
}

pub(crate) struct Objective<'a> {
    model: &'a FrozenMlp,
    config: &'a AlignTrainConfig,
    selectors: [VariableSelector; 3],
    index: &'a ClIndex,
}

impl<'a> Objective<'a> {
    pub(crate) fn new(model: &'a FrozenMlp, config: &'a AlignTrainConfig, index: &'a ClIndex, dim: usize) -> Result<Self> {
        Ok(Self { model, config, selectors: VariableSelector::standard(dim, config.subspace_size)?, index })
    }

    fn intervened(&self) -> &VariableSelector {
        match self.config.variable {
            VarId::X1 => &self.selectors[0],
            _ => &self.selectors[1],
        }
    }

    /// Mean objective over `batch`, and `∂/∂W` when `want_grad`.
    pub(crate) fn eval(&self, af: &AlignmentFunction, batch: &[InterventionSample], want_grad: bool) -> Result<(f64, DMatrix<f64>, usize)> {
        let d = af.dim();
        let mask = self.intervened().mask();
        let causal = [&self.selectors[0], &self.selectors[1]];
        let scale = 1.0 / batch.len() as f64;
        let (bw, cw) = (self.config.behavioral_weight, self.config.cl_weight);
        let mut loss = 0.0;
        let mut grad_w = DMatrix::zeros(d, d);
        let mut dropped = 0;
        for s in batch {
            let ic = interchange_forward(af, &mask, &s.h_trg, &s.h_src);
            let mut g_hat = DVector::zeros(d);
            if bw > 0.0 {
                let (nll, g) = self.model.nll_and_input_grad(&ic.h_hat, s.counterfactual_label);
                loss += bw * nll * scale;
                g_hat += g * (bw * scale);
            }
            if cw > 0.0 {
                let h_cl = cl_vector(self.index, s.cl_key)?;
                match self.config.cl_kind {
                    ClLossKind::Plain => {
                        let (l, g) = cl_loss_grad(&ic.h_hat, h_cl)?;
                        loss += cw * l * scale;
                        g_hat += g * (cw * scale);
                    }
                    ClLossKind::Modified => {
                        let out = modified_cl_loss_grad(&ic.h_hat, h_cl, af, &causal, ZeroNormPolicy::DropCosine)?;
                        loss += cw * out.loss * scale;
                        dropped += out.dropped_cosines;
                        if want_grad {
                            g_hat += out.grad_h_hat * (cw * scale);
                            grad_w += out.grad_w * (cw * scale);
                        }
                    }
                }
            }
            if want_grad {
                interchange_backward(af, &mask, &ic, &g_hat, &mut grad_w);
            }
        }
        Ok((loss, grad_w, dropped))
    }
}

/// Interchange accuracy and the row EMD between intervened and natural
/// feature coordinates on a fixed validation set.
fn validate(
    model: &FrozenMlp,
    af: &AlignmentFunction,
    sel: &VariableSelector,
    samples: &[InterventionSample],
    natural: &[DVector<f64>],
    need_emd: bool,
) -> Result<(f64, Option<f64>)> {
    let mask = sel.mask();
    let mut hits = 0;
    let mut intervened = Vec::with_capacity(samples.len());
    for s in samples {
        let ic = interchange_forward(af, &mask, &s.h_trg, &s.h_src);
        if argmax(&model.logits(&ic.h_hat)) == s.counterfactual_label {
            hits += 1;
        }
        intervened.push(ic.h_hat);
    }
    let iia = hits as f64 / samples.len() as f64;
    let dims: Vec<usize> = (0..FEATURE_DIMS).collect();
    let emd = if need_emd { Some(row_emd(natural, &intervened, &dims, 0)?) } else { None };
    Ok((iia, emd))
}

/// Fit an alignment to a frozen model by Adam on
/// `behavioral_weight·L_DAS + cl_weight·L_CL`. The model is never modified.
pub fn train_alignment(model: &Mlp, data: AlignData<'_>, config: &AlignTrainConfig) -> Result<(AlignmentFunction, AlignHistory)> {
    config.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::EmptyInput("alignment training data"));
    }
    let dim = model.input_dim();
    let frozen = model.frozen();
    let mut rng = Rng::new(config.seed);
    let mut af = AlignmentFunction::random(dim, &mut rng)?;
    let mut history = AlignHistory::default();
    if config.max_epochs == 0 {
        return Ok((af, history));
    }

    let index = ClIndex::from_reps(data.train);
    let objective = Objective::new(&frozen, config, &index, dim)?;
    let in_partition = |c: usize| data.partition.contains(c);
    // Balanced counterfactual classes keep the row EMD about the intervention
    // rather than about a class mix that differs from the natural split.
    let per_class = config.eval_samples.div_ceil(data.partition.included_classes.len().max(1));
    let valid_samples = draw_balanced_samples(
        data.valid,
        data.grid,
        config.variable,
        per_class,
        &mut Rng::stream(config.seed, VALID_STREAM),
        in_partition,
    )?;
    let natural: Vec<DVector<f64>> = data.valid.iter().map(|r| r.h.clone()).collect();
    let need_emd = config.selection_metric == SelectionMetric::BestEmd;

    let mut adam = Adam::new(config.learning_rate, &[dim * dim, dim]);
    // Higher is better for both keys.
    let mut best: Option<((f64, f64), AlignmentFunction)> = None;
    let mut last_improvement = 0usize;

    for epoch in 0..config.max_epochs {
        let samples = draw_samples(data.train, data.grid, config.variable, config.samples_per_epoch, &mut rng, in_partition)?;
        let mut epoch_loss = 0.0;
        for batch in samples.chunks(config.batch_size) {
            let (loss, grad_w, dropped) = objective.eval(&af, batch, true)?;
            epoch_loss += loss * batch.len() as f64;
            history.dropped_cosines += dropped;
            let (grad_m, grad_a) = af.backprop(&grad_w);
            let saved = (af.m().clone(), af.a().clone());
            {
                let (m, a) = af.param_slices_mut();
                adam.step(&mut [m, a], &[grad_m.as_slice(), grad_a.as_slice()]);
            }
            if af.commit().is_err() {
                // A sign parameter landed exactly on zero; keep the last valid step.
                af.set_params(saved.0, saved.1)?;
            }
        }
        let mut record = AlignEpoch {
            epoch,
            train_loss: epoch_loss / samples.len() as f64,
            valid_loss: None,
            valid_iia: None,
            valid_row_emd: None,
        };

        let last = epoch + 1 == config.max_epochs;
        if epoch % config.eval_every == 0 || last {
            let (valid_loss, _, _) = objective.eval(&af, &valid_samples, false)?;
            let (iia, emd) = validate(&frozen, &af, objective.intervened(), &valid_samples, &natural, need_emd)?;
            record.valid_loss = Some(valid_loss);
            record.valid_iia = Some(iia);
            record.valid_row_emd = emd;
            let key = match config.selection_metric {
                SelectionMetric::BestIia => (iia, -valid_loss),
                SelectionMetric::BestEmd => (-emd.unwrap_or(f64::INFINITY), iia),
            };
            if best.as_ref().is_none_or(|(k, _)| key > *k) {
                best = Some((key, af.clone()));
                history.best_epoch = Some(epoch);
                last_improvement = epoch;
            }
        }
        history.epochs.push(record);
        if epoch - last_improvement >= config.patience {
            break;
        }
    }

    let (_, best_af) = best.expect("the first epoch is always evaluated");
    Ok((best_af, history))
}

/// Validation-style loss of the configured objective on arbitrary samples.
pub fn alignment_objective(
    model: &Mlp,
    af: &AlignmentFunction,
    samples: &[InterventionSample],
    index: &ClIndex,
    config: &AlignTrainConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("intervention samples"));
    }
    let frozen = model.frozen();
    let objective = Objective::new(&frozen, config, index, af.dim())?;
    objective.eval(af, samples, false).map(|(l, _, _)| l)
}
