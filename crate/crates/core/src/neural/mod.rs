// SPDX-License-Identifier: MIT OR Apache-2.0

//! The target classifier: batchnorm → affine → ReLU → dropout → batchnorm →
//! affine, trained with cross-entropy and Adam.

pub mod checkpoint;
mod mlp;
mod train;

pub use checkpoint::{load_mlp, mlp_from_text, mlp_to_text, save_mlp};
pub use mlp::{
    argmax, eval_from_input, log_softmax, softmax, BatchNorm, ForwardTrace, FrozenMlp, Mlp, MlpConfig, Mode,
    BN_EPS, BN_MOMENTUM,
};
pub use train::{evaluate_split, train_mlp, EpochRecord, TrainHistory};
