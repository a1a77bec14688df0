//! Adaptive feature enhancement (AFE) polyp detector at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`tape`], [`gradcheck`]: a small `f64` tensor engine with
//!   reverse-mode autodiff and a finite-difference checker.
//! * [`afia`] and [`saci`]: the two feature-enhancement modules.
//! * [`model`]: stem, AFE blocks over a feature pyramid, grid head, NMS.
//! * [`boxes`] and [`losses`]: box geometry, GIoU/L1 losses and optimal assignment.
//! * [`metrics`]: matching, precision/recall/F1, average precision, FPS.
//! * [`synth`], [`optim`], [`train`], [`checkpoint`], [`ablation`]: synthetic
//!   data, AdamW, the training/evaluation harness and persistence.

pub mod ablation;
pub mod afia;
pub mod boxes;
pub mod checks;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod saci;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Order-preserving map, parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.iter().map(f).collect()
}
