//! Streaming test-time adaptation for tabular classifiers under label shift.
//!
//! A source classifier is trained once; a shift-aware temperature network is
//! post-trained on the same source data; at test time each incoming batch is
//! recalibrated and its predictions realigned to a running estimate of the
//! target label distribution, without touching model weights.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases below
//! fix the common `f64` instantiations.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrator;
pub mod error;
pub mod handler;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod shift;
pub mod source;
pub mod tabular;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type DenseNet64 = nn::DenseNet<f64>;
pub type DenseNet32 = nn::DenseNet<f32>;
pub type SourceModel64 = source::SourceModel<f64>;
pub type SourceModel32 = source::SourceModel<f32>;
pub type Calibrator64 = calibrator::Calibrator<f64>;
pub type Calibrator32 = calibrator::Calibrator<f32>;
pub type LogitsBatch64 = source::LogitsBatch<f64>;
pub type HandlerState64 = handler::HandlerState<f64>;
pub type AdaptedBatch64 = handler::AdaptedBatch<f64>;
