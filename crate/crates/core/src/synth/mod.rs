//! Synthetic multi-site segmentation data.

mod augment;
mod io;
mod normalize;
mod shift;
mod subject;

pub use augment::{apply_transform, augment_batch, AugmentConfig, Transform};
pub use io::{export_png, load_subject, save_subject};
pub use normalize::{normalize_intensities, percentile};
pub use shift::{apply_shift, BiasField, ShiftParams};
pub use subject::{generate_subject, Subject};
