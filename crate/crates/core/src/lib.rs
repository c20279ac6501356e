//! Building-footprint segmentation with a cooperative CNN/attention encoder,
//! global-local feature fusion and an uncertainty-aggregated decoder, on top
//! of a small reverse-mode autodiff engine.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`kernels`] and [`autodiff`]: dense arrays, numeric kernels
//!   and the tape that differentiates them.
//! - [`encoder`], [`fusion`] and [`uad`]: the three network stages.
//! - [`objectives`] and [`metrics`]: training losses and evaluation.
//! - [`data`]: synthetic scenes, PPM/PGM I/O, tiling and augmentation.
//! - [`model`], [`config`] and [`train`]: the assembled network, its
//!   configuration, the optimizer loop and checkpoints.
//!
//! The `book/` directory next to the workspace walks through each layer; its
//! code listings are compiled and run as doc-tests of this crate.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod train;
pub mod uad;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/encoder.md")]
    struct Encoder;
    #[doc = include_str!("../../../book/src/fusion.md")]
    struct Fusion;
    #[doc = include_str!("../../../book/src/decoder.md")]
    struct Decoder;
    #[doc = include_str!("../../../book/src/objectives.md")]
    struct Objectives;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
}
