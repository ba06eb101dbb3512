//! Paired dental-radiograph change classification, built from scratch.
//!
//! The crate provides a small reverse-mode autodiff tensor library, the
//! layers needed for a SimAM-augmented ResNet-50, classical feature
//! extractors (subsampling, intensity histograms, PCA, HOG), a synthetic
//! paired-radiograph generator with a seeded augmentation pipeline, and a
//! training/evaluation harness with macro-F1 metrics and a benchmark grid.
//!
//! Everything is deterministic given a root seed: weight init, shuffles,
//! augmentation draws and synthetic data all derive named ChaCha streams, and
//! internal parallelism never changes results.

pub mod elem;
pub mod error;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

mod gemm;
pub mod rng;

pub mod nn;
pub mod simam;

pub mod resnet;

pub mod datapipe;
pub mod features;

pub mod harness;

pub mod verify;

pub use elem::Elem;
pub use error::{Error, Result};
pub use tape::{Tape, Val};
pub use tensor::{tensor_new, Tensor};
