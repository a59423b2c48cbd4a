//! Dataset generation, model assembly, training, and sweeps.

pub mod dataset;
pub mod model;
pub mod sweep;
pub mod synth;
pub mod train;

pub use dataset::{ingest_dir, Dataset, Sample};
pub use synth::{synth_dataset, texture_image, ShapeKind, ShapeSpec};
