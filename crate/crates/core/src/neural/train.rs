// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::mlp::{log_softmax, argmax, FrozenMlp, Mlp, MlpConfig, Mode};
use crate::error::{check_dim, Error, Result};
use crate::numerics::Rng;
use crate::optim::Adam;
use crate::synthdata::LabeledRep;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose snapshot was returned, if any epoch ran.
    pub best_epoch: Option<usize>,
}

/// Mean cross-entropy and accuracy of an Eval-mode model over a labelled set.
pub fn evaluate_split(frozen: &FrozenMlp, data: &[LabeledRep]) -> (f64, f64) {
    if data.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for rep in data {
        let logits = frozen.logits(&rep.h);
        loss -= log_softmax(&logits)[rep.class_label];
        if argmax(&logits) == rep.class_label {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    (loss / n, correct as f64 / n)
}

fn check_split(data: &[LabeledRep], config: &MlpConfig) -> Result<()> {
    for rep in data {
        check_dim(config.input_dim, rep.h.len(), "training sample")?;
        if rep.class_label >= config.n_classes {
            return Err(Error::Config(format!(
                "label {} out of range for {} classes",
                rep.class_label, config.n_classes
            )));
        }
    }
    Ok(())
}

/// Adam on mini-batch cross-entropy with early stopping on validation loss.
/// Returns the snapshot with the lowest validation loss, in Eval mode.
pub fn train_mlp(train: &[LabeledRep], valid: &[LabeledRep], config: &MlpConfig) -> Result<(Mlp, TrainHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if valid.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    check_split(train, config)?;
    check_split(valid, config)?;

    let mut rng = Rng::new(config.seed);
    let mut model = Mlp::new(config, &mut rng)?;
    let mut history = TrainHistory { epochs: Vec::new(), best_epoch: None };
    if config.max_epochs == 0 {
        return Ok((model, history));
    }

    let dim = config.input_dim;
    let mut adam = Adam::new(config.learning_rate, &model.param_sizes());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Mlp)> = None;
    let mut since_best = 0usize;

    for epoch in 0..config.max_epochs {
        model.mode = Mode::Train;
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            // Batchnorm statistics are undefined for a single sample.
            if chunk.len() < 2 {
                continue;
            }
            let mut x = DMatrix::zeros(dim, chunk.len());
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].class_label).collect();
            for (j, &i) in chunk.iter().enumerate() {
                x.set_column(j, &train[i].h);
            }
            let mask = model.draw_mask(chunk.len(), &mut rng);
            let pass = model.train_pass(&x, &mask);
            let (_, grads) = model.backward(&pass, &labels);
            model.absorb_batch_stats(&pass);
            adam.step(&mut model.param_slices_mut(), &grads.slices());
        }
        model.mode = Mode::Eval;

        let frozen = model.frozen();
        let (train_loss, train_accuracy) = evaluate_split(&frozen, train);
        let (valid_loss, valid_accuracy) = evaluate_split(&frozen, valid);
        history.epochs.push(EpochRecord { epoch, train_loss, train_accuracy, valid_loss, valid_accuracy });

        let improved = best.as_ref().is_none_or(|(loss, _)| valid_loss < *loss);
        if improved {
            best = Some((valid_loss, model.clone()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                break;
            }
        }
    }

    let (_, mut snapshot) = best.expect("at least one epoch ran");
    snapshot.mode = Mode::Eval;
    Ok((snapshot, history))
}
