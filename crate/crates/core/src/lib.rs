//! Radar-inertial odometry from range-azimuth spectra, trained without pose labels.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode automatic differentiation
//!   (the substrate for every learned quantity).
//! - [`preintegration`]: mid-point IMU pre-integration between radar frames,
//!   with a learnable bias regressor.
//! - [`simulator`]: synthetic range-azimuth spectra, Doppler maps, IMU streams
//!   and ground truth for desk-scale experiments.
//! - [`fusion`]: soft-mask preprocessing and rotation-based cross fusion of
//!   adjacent spectra.
//! - [`extractor`]: encoder-decoder landmark extractor with location, score and
//!   descriptor heads, plus differentiable association.
//! - [`velocity`]: sub-pixel Doppler lookup, differentiable ego-velocity least
//!   squares and RANSAC static-landmark distillation.
//! - [`losses`]: the three self-supervised losses and their weighted total.
//! - [`pipeline`]: training loop, odometry inference and map accumulation.
//! - [`evaluation`]: relative pose errors and map quality metrics.
//! - [`config`]: JSON run configuration shared by the CLI subcommands.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod extractor;
pub mod fusion;
pub mod geom;
pub mod losses;
pub mod mat;
pub mod params;
pub mod pipeline;
pub mod preintegration;
pub mod rng;
pub mod simulator;
pub mod tensor;
pub mod velocity;

pub use error::Error;
