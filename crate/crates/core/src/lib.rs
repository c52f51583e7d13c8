//! Centroid-indexed local residual experts for recurring dynamics shifts.

pub mod config;
pub mod controller;
pub mod encoder;
pub mod env;
pub mod error;
pub mod evalstats;
pub mod expert;
pub mod geomdiag;
pub mod indexer;
pub mod manifest;
pub mod ooddet;
pub mod pipeline;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
