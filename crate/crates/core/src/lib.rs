//! Inertial tracking from accelerometer, gyroscope and magnetometer streams.
//!
//! The crate covers synthetic data generation, feature extraction with a
//! body-frame magnetometer derivative, a time-frequency block-recurrent
//! transformer (TF-BRT) trained with a weighted multi-loss, classical
//! baselines and trajectory metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod config;
pub mod error;
pub mod geom;
pub mod ingest;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod tfbrt;
pub mod train;

pub use error::{Error, Result};
