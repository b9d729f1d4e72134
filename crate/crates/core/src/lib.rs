//! Online self-supervised training of a 3D LiDAR human classifier from
//! multisensor people tracking.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the precision used by the simulator and pipeline.

// Small dense matrices read best indexed; `!(a > b)` comparisons reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod clustering;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod fusion;
pub mod logs;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod simulator;
pub mod tracker;

pub use scalar::Scalar;

pub type Real = f64;

pub type Point64 = model::Point<f64>;
pub type Cluster64 = model::Cluster<f64>;
pub type Detection64 = model::Detection<f64>;
pub type FeatureVector64 = features::FeatureVector<f64>;
pub type ClassifierModel64 = classifier::ClassifierModel<f64>;
pub type ClassifierModel32 = classifier::ClassifierModel<f32>;
pub type Tracker64 = tracker::Tracker<f64>;
pub type Tracker32 = tracker::Tracker<f32>;
