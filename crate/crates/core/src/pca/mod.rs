//! Principal-component experts on last-layer feature patches.

mod basis;
mod patches;

pub use basis::{fit_pca, symmetric_eigen, ChannelBasis, PrincipalBasis, SymmetricEigen};
pub use patches::{
    extract_patches, filter_active, filter_active_patches, foreground_probability, patch_indices, patch_sites, Patch,
    PatchSite, PcaConfig,
};
