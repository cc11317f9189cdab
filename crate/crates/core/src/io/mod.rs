//! On-disk formats: checkpoints, datasets, keypoints and result exports.

mod checkpoint;
mod dataset;
mod export;

pub use checkpoint::*;
pub use dataset::{read_dataset, sidecar_path, write_dataset, IMAGE_MAGIC};
pub use export::*;
