// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{gaussian_matrix, Rng};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 18,
            hidden_width: 128,
            n_classes: 10,
            dropout_p: 0.5,
            learning_rate: 0.01,
            max_epochs: 300,
            early_stop_patience: 30,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.n_classes == 0 || self.batch_size == 0 {
            return Err(Error::Config("MLP dimensions and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
    pub running_mean: DVector<f64>,
    pub running_var: DVector<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: DVector::from_element(dim, 1.0),
            beta: DVector::zeros(dim),
            running_mean: DVector::zeros(dim),
            running_var: DVector::from_element(dim, 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Per-unit `(scale, shift)` of the Eval-mode map `x ↦ scale·x + shift`.
    pub fn eval_affine(&self) -> (DVector<f64>, DVector<f64>) {
        let scale = DVector::from_fn(self.dim(), |i, _| self.gamma[i] / (self.running_var[i] + self.eps).sqrt());
        let shift = DVector::from_fn(self.dim(), |i, _| self.beta[i] - scale[i] * self.running_mean[i]);
        (scale, shift)
    }

    fn eval_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let (scale, shift) = self.eval_affine();
        x.component_mul(&scale) + shift
    }

    fn update_running(&mut self, mean: &DVector<f64>, unbiased_var: &DVector<f64>) {
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + mean * m;
        self.running_var = &self.running_var * (1.0 - m) + unbiased_var * m;
    }
}

/// Every intermediate of a single-input forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: DVector<f64>,
    pub input_norm: DVector<f64>,
    pub hidden_pre: DVector<f64>,
    pub hidden_post: DVector<f64>,
    /// Inverted-dropout multipliers (0 or 1/(1-p)); `None` in Eval mode.
    pub dropout_mask: Option<DVector<f64>>,
    pub hidden_dropped: DVector<f64>,
    pub hidden_norm: DVector<f64>,
    pub logits: DVector<f64>,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub bn_in: BatchNorm,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub bn_hidden: BatchNorm,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub dropout_p: f64,
    pub mode: Mode,
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let exp = logits.map(|z| (z - max).exp());
    let total = exp.sum();
    exp / total
}

pub fn log_softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.map(|z| z - lse)
}

impl Mlp {
    pub fn new(config: &MlpConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, w, c) = (config.input_dim, config.hidden_width, config.n_classes);
        Ok(Self {
            bn_in: BatchNorm::identity(d),
            w1: gaussian_matrix(rng, w, d, 0.0, 1.0 / (d as f64).sqrt()),
            b1: DVector::zeros(w),
            bn_hidden: BatchNorm::identity(w),
            w2: gaussian_matrix(rng, c, w, 0.0, 1.0 / (w as f64).sqrt()),
            b2: DVector::zeros(c),
            dropout_p: config.dropout_p,
            mode: Mode::Eval,
        })
    }

    pub fn zeros(input_dim: usize, hidden_width: usize, n_classes: usize) -> Self {
        Self {
            bn_in: BatchNorm::identity(input_dim),
            w1: DMatrix::zeros(hidden_width, input_dim),
            b1: DVector::zeros(hidden_width),
            bn_hidden: BatchNorm::identity(hidden_width),
            w2: DMatrix::zeros(n_classes, hidden_width),
            b2: DVector::zeros(n_classes),
            dropout_p: 0.0,
            mode: Mode::Eval,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.w2.nrows()
    }

    /// Single-input forward. In Train mode the input is treated as a batch of
    /// one, so batchnorm uses its own statistics and `rng` draws the dropout mask.
    pub fn forward(&self, h: &DVector<f64>, rng: Option<&mut Rng>) -> Result<ForwardTrace> {
        check_dim(self.input_dim(), h.len(), "mlp input")?;
        match self.mode {
            Mode::Eval => Ok(self.forward_eval(h)),
            Mode::Train => {
                let rng = rng.ok_or_else(|| Error::Config("Train-mode forward requires an rng".into()))?;
                let x = DMatrix::from_column_slice(h.len(), 1, h.as_slice());
                let mask = self.draw_mask(1, rng);
                let pass = self.train_pass(&x, &mask);
                let col = |m: &DMatrix<f64>| m.column(0).into_owned();
                let logits = col(&pass.logits);
                Ok(ForwardTrace {
                    input: h.clone(),
                    input_norm: col(&pass.y1),
                    hidden_pre: col(&pass.a1),
                    hidden_post: col(&pass.r1),
                    dropout_mask: Some(col(&mask)),
                    hidden_dropped: col(&pass.d1),
                    hidden_norm: col(&pass.y2),
                    predicted: argmax(&logits),
                    logits,
                })
            }
        }
    }

    pub(crate) fn forward_eval(&self, h: &DVector<f64>) -> ForwardTrace {
        let input_norm = self.bn_in.eval_apply(h);
        let hidden_pre = &self.w1 * &input_norm + &self.b1;
        let hidden_post = hidden_pre.map(|v| v.max(0.0));
        let hidden_norm = self.bn_hidden.eval_apply(&hidden_post);
        let logits = &self.w2 * &hidden_norm + &self.b2;
        ForwardTrace {
            input: h.clone(),
            input_norm,
            hidden_pre,
            hidden_dropped: hidden_post.clone(),
            hidden_post,
            dropout_mask: None,
            hidden_norm,
            predicted: argmax(&logits),
            logits,
        }
    }

    /// Eval-mode logits regardless of `mode`.
    pub fn eval_logits(&self, h: &DVector<f64>) -> DVector<f64> {
        self.forward_eval(h).logits
    }

    pub fn frozen(&self) -> FrozenMlp {
        FrozenMlp::from_mlp(self)
    }

    pub(crate) fn draw_mask(&self, batch: usize, rng: &mut Rng) -> DMatrix<f64> {
        let p = self.dropout_p;
        if p == 0.0 {
            return DMatrix::from_element(self.hidden_width(), batch, 1.0);
        }
        let keep = 1.0 / (1.0 - p);
        DMatrix::from_fn(self.hidden_width(), batch, |_, _| if rng.uniform() < p { 0.0 } else { keep })
    }

    /// Train-mode batch pass over columns of `x`. Pure: running statistics are
    /// left untouched (see [`Mlp::absorb_batch_stats`]).
    pub(crate) fn train_pass(&self, x: &DMatrix<f64>, mask: &DMatrix<f64>) -> TrainPass {
        let (y1, n1) = bn_train(&self.bn_in, x);
        let mut a1 = &self.w1 * &y1;
        for mut c in a1.column_iter_mut() {
            c += &self.b1;
        }
        let r1 = a1.map(|v| v.max(0.0));
        let d1 = r1.component_mul(mask);
        let (y2, n2) = bn_train(&self.bn_hidden, &d1);
        let mut logits = &self.w2 * &y2;
        for mut c in logits.column_iter_mut() {
            c += &self.b2;
        }
        TrainPass { y1, n1, a1, r1, mask: mask.clone(), d1, y2, n2, logits }
    }

    pub(crate) fn absorb_batch_stats(&mut self, pass: &TrainPass) {
        self.bn_in.update_running(&pass.n1.mean, &pass.n1.unbiased_var);
        self.bn_hidden.update_running(&pass.n2.mean, &pass.n2.unbiased_var);
    }

    /// Mean cross-entropy of a Train-mode pass and its parameter gradients.
    pub(crate) fn backward(&self, pass: &TrainPass, labels: &[usize]) -> (f64, MlpGrads) {
        let batch = labels.len();
        let bf = batch as f64;
        let mut loss = 0.0;
        let mut g_logits = DMatrix::zeros(self.n_classes(), batch);
        for (j, &label) in labels.iter().enumerate() {
            let z = pass.logits.column(j).into_owned();
            let logp = log_softmax(&z);
            loss -= logp[label];
            for k in 0..z.len() {
                g_logits[(k, j)] = (logp[k].exp() - if k == label { 1.0 } else { 0.0 }) / bf;
            }
        }
        loss /= bf;

        let g_w2 = &g_logits * pass.y2.transpose();
        let g_b2 = row_sums(&g_logits);
        let g_y2 = self.w2.transpose() * &g_logits;
        let (g_d1, g_gamma2, g_beta2) = bn_backward(&self.bn_hidden, &pass.n2, &g_y2);
        let g_r1 = g_d1.component_mul(&pass.mask);
        let g_a1 = g_r1.zip_map(&pass.a1, |g, a| if a > 0.0 { g } else { 0.0 });
        let g_w1 = &g_a1 * pass.y1.transpose();
        let g_b1 = row_sums(&g_a1);
        let g_y1 = self.w1.transpose() * &g_a1;
        let (_, g_gamma1, g_beta1) = bn_backward(&self.bn_in, &pass.n1, &g_y1);
        (
            loss,
            MlpGrads {
                gamma1: g_gamma1,
                beta1: g_beta1,
                w1: g_w1,
                b1: g_b1,
                gamma2: g_gamma2,
                beta2: g_beta2,
                w2: g_w2,
                b2: g_b2,
            },
        )
    }

    /// Trainable parameters in a fixed order shared with [`MlpGrads::slices`].
    pub(crate) fn param_slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.bn_in.gamma.as_mut_slice(),
            self.bn_in.beta.as_mut_slice(),
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.bn_hidden.gamma.as_mut_slice(),
            self.bn_hidden.beta.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }

    pub(crate) fn param_sizes(&self) -> [usize; 8] {
        let (d, w, c) = (self.input_dim(), self.hidden_width(), self.n_classes());
        [d, d, w * d, w, w, w, c * w, c]
    }

    /// Order-sensitive checksum over every parameter and running statistic.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |values: &[f64]| {
            for v in values {
                for byte in v.to_bits().to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x0100_0000_01b3);
                }
            }
        };
        for bn in [&self.bn_in, &self.bn_hidden] {
            eat(bn.gamma.as_slice());
            eat(bn.beta.as_slice());
            eat(bn.running_mean.as_slice());
            eat(bn.running_var.as_slice());
        }
        eat(self.w1.as_slice());
        eat(self.b1.as_slice());
        eat(self.w2.as_slice());
        eat(self.b2.as_slice());
        hash
    }
}

pub(crate) struct BnStats {
    pub mean: DVector<f64>,
    pub unbiased_var: DVector<f64>,
    pub inv_std: DVector<f64>,
    pub xhat: DMatrix<f64>,
}

pub(crate) struct TrainPass {
    pub y1: DMatrix<f64>,
    pub n1: BnStats,
    pub a1: DMatrix<f64>,
    pub r1: DMatrix<f64>,
    pub mask: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub y2: DMatrix<f64>,
    pub n2: BnStats,
    pub logits: DMatrix<f64>,
}

pub(crate) struct MlpGrads {
    pub gamma1: DVector<f64>,
    pub beta1: DVector<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub gamma2: DVector<f64>,
    pub beta2: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl MlpGrads {
    pub fn slices(&self) -> [&[f64]; 8] {
        [
            self.gamma1.as_slice(),
            self.beta1.as_slice(),
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.gamma2.as_slice(),
            self.beta2.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ]
    }
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| m.row(i).sum())
}

fn bn_train(bn: &BatchNorm, x: &DMatrix<f64>) -> (DMatrix<f64>, BnStats) {
    let (dim, batch) = x.shape();
    let bf = batch as f64;
    let mean = row_sums(x) / bf;
    let mut var = DVector::zeros(dim);
    for i in 0..dim {
        var[i] = x.row(i).iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / bf;
    }
    let inv_std = var.map(|v| 1.0 / (v + bn.eps).sqrt());
    let xhat = DMatrix::from_fn(dim, batch, |i, j| (x[(i, j)] - mean[i]) * inv_std[i]);
    let y = DMatrix::from_fn(dim, batch, |i, j| bn.gamma[i] * xhat[(i, j)] + bn.beta[i]);
    let unbiased_var = if batch > 1 { &var * (bf / (bf - 1.0)) } else { var };
    (y, BnStats { mean, unbiased_var, inv_std, xhat })
}

fn bn_backward(bn: &BatchNorm, stats: &BnStats, g_y: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let (dim, batch) = g_y.shape();
    let bf = batch as f64;
    let g_beta = row_sums(g_y);
    let g_gamma = row_sums(&g_y.component_mul(&stats.xhat));
    let g_x = DMatrix::from_fn(dim, batch, |i, j| {
        bn.gamma[i] * stats.inv_std[i] / bf * (bf * g_y[(i, j)] - g_beta[i] - stats.xhat[(i, j)] * g_gamma[i])
    });
    (g_x, g_gamma, g_beta)
}

/// Eval-mode network with both batchnorms folded into the adjacent affine
/// maps: `logits = A·relu(B·h + e) + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenMlp {
    pub b: DMatrix<f64>,
    pub e: DVector<f64>,
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl FrozenMlp {
    pub fn from_mlp(mlp: &Mlp) -> Self {
        let (s1, t1) = mlp.bn_in.eval_affine();
        let (s2, t2) = mlp.bn_hidden.eval_affine();
        let mut b = mlp.w1.clone();
        for (j, mut col) in b.column_iter_mut().enumerate() {
            col *= s1[j];
        }
        let e = &mlp.w1 * &t1 + &mlp.b1;
        let mut a = mlp.w2.clone();
        for (j, mut col) in a.column_iter_mut().enumerate() {
            col *= s2[j];
        }
        let c = &mlp.w2 * &t2 + &mlp.b2;
        Self { b, e, a, c }
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.a.nrows()
    }

    pub fn logits(&self, h: &DVector<f64>) -> DVector<f64> {
        let pre = &self.b * h + &self.e;
        &self.a * pre.map(|v| v.max(0.0)) + &self.c
    }

    pub fn predict(&self, h: &DVector<f64>) -> usize {
        argmax(&self.logits(h))
    }

    /// Cross-entropy `-log p(label | h)` and its gradient with respect to `h`.
    pub fn nll_and_input_grad(&self, h: &DVector<f64>, label: usize) -> (f64, DVector<f64>) {
        let pre = &self.b * h + &self.e;
        let logits = &self.a * pre.map(|v| v.max(0.0)) + &self.c;
        let logp = log_softmax(&logits);
        let mut g = logp.map(f64::exp);
        g[label] -= 1.0;
        let g_hidden = (self.a.transpose() * g).zip_map(&pre, |g, p| if p > 0.0 { g } else { 0.0 });
        (-logp[label], self.b.transpose() * g_hidden)
    }
}

/// Softmax probabilities and argmax classes for a batch, in Eval mode.
pub fn eval_from_input(model: &Mlp, h_batch: &[DVector<f64>]) -> Result<(Vec<usize>, Vec<DVector<f64>>)> {
    if model.mode != Mode::Eval {
        return Err(Error::Config("eval_from_input requires an Eval-mode model".into()));
    }
    let mut classes = Vec::with_capacity(h_batch.len());
    let mut probs = Vec::with_capacity(h_batch.len());
    for h in h_batch {
        check_dim(model.input_dim(), h.len(), "mlp input")?;
        let logits = model.eval_logits(h);
        classes.push(argmax(&logits));
        probs.push(softmax(&logits));
    }
    Ok((classes, probs))
}
