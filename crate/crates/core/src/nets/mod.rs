//! The normalization module, the segmentation network, and their training.

mod checkpoint;
mod layers;
mod loss;
mod model;
mod train;

pub use checkpoint::{
    fingerprint_bytes, load_checkpoint, load_phi_delta, save_checkpoint, save_phi_delta, ModelCheckpoint, PhiDelta,
};
pub use layers::{BatchNorm2d, Conv2d, RunningStats, BN_EPS, BN_MOMENTUM};
pub use loss::{dice_loss, dice_scores, entropy_loss, one_hot, predict_labels};
pub use model::{
    BnMode, ForwardOptions, ForwardOutput, Model, NormModule, NormModuleConfig, Prediction, TapPoint, TaskNet,
    TaskNetConfig,
};
pub use train::{evaluate_dice, train_supervised, TrainLogRow, TrainOptions, TrainOutcome};
