//! Time-first, space-later land classification toolkit.
//!
//! The crate covers the full workflow: image-collection catalogs feed a
//! regular data cube builder; labeled points become time-series tables;
//! a self-organizing map grades sample quality; from-scratch classifiers
//! (random forest, MLP, 1D-CNN) train on the tables; a fault-tolerant
//! chunked engine classifies whole cubes into probability rasters;
//! Bayesian smoothing and argmax labeling produce maps; and stratified
//! estimators turn reference points into error-adjusted area estimates.

pub mod assess;
pub mod catalog;
pub mod cube;
pub mod engine;
pub mod error;
pub mod io;
pub mod models;
pub mod quality;
pub mod samples;
pub mod smooth;
pub mod synth;

pub use error::{Error, Result};
