//! Desk-scale 3-D deformable image registration with a recurrent
//! voxel-to-region correlation search, trainable end to end without an
//! external ML framework.
//!
//! The crate is organized around a small set of layers:
//! - [`vol`]: volumes, displacement fields, warping, resampling, Jacobians
//! - [`diff`]: reverse-mode tape, 3-D conv kernels, parameters, AdamW
//! - [`encoder`], [`search`], [`updater`]: the network blocks
//! - [`pyramid`]: the coarse-to-fine registration driver
//! - [`losses`], [`metrics`]: training objectives and evaluation
//! - [`synth`], [`trainer`], [`config`]: data generation and the train loop

pub mod config;
pub mod diff;
pub mod direct;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod pyramid;
pub mod search;
pub mod synth;
pub mod trainer;
pub mod updater;
pub mod vol;
pub mod vol3;

pub use error::{RecorrError, Result};
pub use vol::{DisplacementField, JacobianMap, Scalar, Volume};
