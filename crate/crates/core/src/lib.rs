//! Gradient compression with an adaptive compression-factor controller.
//!
//! The crate contains sparsifying compressors with error feedback, the
//! GraVAC controller that picks a compression factor from measured gain and
//! modeled throughput, an α-β communication cost model, and a seeded
//! multi-worker training simulator used to exercise all of it.

pub mod compress;
pub mod config;
pub mod controller;
pub mod costmodel;
pub mod error;
pub mod experiment;
pub mod feedback;
pub mod grad;
pub mod kde;
pub mod metrics;
pub mod sim;

pub use compress::{Compressor, CompressorKind, SparseGradient};
pub use config::RunConfig;
pub use controller::{CfChoice, Controller, ControllerConfig, ScalingPolicy};
pub use costmodel::{CostModelParams, Topology};
pub use error::{GravacError, Result};
pub use feedback::ResidualStore;
pub use grad::{GradientVector, SeededRng};
pub use metrics::Cf;
pub use sim::{run_training, Mode, TraceRecord};
