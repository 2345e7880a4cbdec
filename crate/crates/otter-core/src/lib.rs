//! Desk-scale spatio-temporal video object detection.
//!
//! A miniature single-stage detector that can be extended with ConvLSTM
//! temporal fusion and CBAM attention, together with the surrounding
//! pipeline: temporal augmentations, dataset handling, a synthetic video
//! generator, mAP evaluation, and frame-by-frame confidence analysis.
//!
//! The numeric kernel is self-contained and every differentiable operation
//! is verified against central finite differences at f64.

pub mod analysis;
pub mod attention;
pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imageio;
pub mod numkit;
pub mod rng;
pub mod temporal;

pub use error::{Error, Result};

pub use serde_json;
