//! Superpixel capsule network pipeline.
//!
//! The crate is organized around the data flow of the classifier:
//!
//! * [`tensorio`]: images (PPM/PGM), color conversions, and the `SPCT`
//!   tensor file format used for labels, weights, and checkpoints.
//! * [`slic`]: SLIC superpixel segmentation with connectivity and
//!   exact-count guarantees.
//! * [`entropy`]: hue-histogram entropy of superpixels and of square
//!   sliding windows, plus the sweep report comparing the two.
//! * [`sppool`]: associating image pixels with conv feature cells and
//!   pooling feature maps over superpixels (with the exact adjoint).
//! * [`backbone`]: a small conv/ReLU/maxpool feature extractor with
//!   hand-written forward and backward passes.
//! * [`capsroute`]: capsule prediction, squash, dynamic routing, margin
//!   loss, and backprop through the unrolled routing loop.
//! * [`explain`]: per-superpixel contribution scores and heatmap
//!   rendering.
//! * [`harness`]: model assembly, synthetic data, training, evaluation,
//!   and the S/Q sweep.
//! * [`check`]: finite-difference gradient checking for every
//!   differentiable op and the end-to-end loss.

pub mod backbone;
pub mod capsroute;
pub mod check;
pub mod entropy;
pub mod error;
pub mod explain;
pub mod harness;
pub mod real;
pub mod slic;
pub mod sppool;
pub mod tensorio;

pub use error::{Error, Result};
pub use real::Real;
