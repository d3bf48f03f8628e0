//! KL divergences between expert densities and the matching losses built from them.

mod identities;
mod kl;
mod loss;

pub use identities::{
    check_factorized_kl_decomposition, check_subject_aggregation_identity, AggregationCheck, FactorizationCheck,
};
pub use kl::{kl_gaussian, kl_gaussian_tape, kl_grid, kl_grid_tape, kl_pdf, Q_FLOOR};
pub use loss::{
    loss_foe_cnn, loss_foe_cnn_pca, loss_tape, LossBreakdown, TapeGroup, TapeLoss, TestExperts, DEFAULT_LAMBDA,
};
