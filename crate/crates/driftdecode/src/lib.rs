//! DriftDecode: a wireless image transmission workbench.
//!
//! An end-to-end joint source-channel coding system with an SNR-conditioned
//! one-step U-Net receiver, trained with a pixel MSE term plus an
//! instance-level drift-field texture loss computed in perceptual feature
//! space. The crate bundles everything needed to train, evaluate, and
//! property-test the method at desk scale: AWGN/Rayleigh channel simulation
//! with zero-forcing equalization, pluggable frozen feature extractors,
//! reconstruction metrics, dataset loaders, and a small reverse-mode
//! autodiff engine the models run on.

pub mod archive;
pub mod channel;
pub mod checkpoint;
pub mod config;
mod conv;
pub mod data;
pub mod driftfield;
pub mod error;
pub mod features;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Elem, Tensor};
