//! Test-time adaptation of a normalization module by matching Field-of-Experts
//! marginals.
//!
//! A shallow normalization network and a U-Net style segmentation network are
//! trained on a synthetic source domain. For every training subject, 1D
//! distributions of each feature channel (and of PCA loadings of last-layer
//! feature patches) are summarized and stored. At test time only the
//! normalization network is updated, so that the test subject's expert
//! distributions match the stored ones in KL divergence.

pub mod bench;
mod codec;
pub mod divergence;
pub mod error;
pub mod nets;
pub mod pca;
pub mod prior;
pub mod synth;
pub mod tensor;
pub mod tta;

pub use error::{Error, Result};
