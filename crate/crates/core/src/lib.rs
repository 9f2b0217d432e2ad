//! Post-hoc out-of-distribution detection for LiDAR 3D object detection.
//!
//! The crate builds synthetic annotated scenes, runs them through a frozen
//! geometric surrogate detector, synthesizes training outliers by scaling
//! ID objects, trains a small MLP head on the detector's features, and
//! scores it against logit-based baselines with a BEV-matching evaluation.

pub mod baselines;
pub mod bench;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod features;
pub mod geometry;
pub mod head;
pub mod metrics;
pub mod outlier;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
