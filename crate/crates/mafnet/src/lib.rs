//! Hyperspectral image denoising with a multi-scale adaptive fusion network.
//!
//! The crate covers the full pipeline: cube containers and file formats
//! ([`cube`]), the five-case synthetic noise protocol ([`noise`]), the network
//! blocks and assembly ([`blocks`], [`model`]) on a small reverse-mode
//! autodiff graph ([`graph`]), training objectives ([`loss`]), quality
//! metrics ([`metrics`]), the incremental training schedule ([`train`]), and
//! plot emission ([`plot`]). The `mafnet` binary wires these into the
//! `synth-data`, `synth`, `train`, `denoise`, `eval`, and `plot` commands.

pub mod blocks;
pub mod cli;
pub mod cube;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod train;

pub use cube::{HSICube, ImagePyramid, NormalizationMode, NormalizationRecord};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
