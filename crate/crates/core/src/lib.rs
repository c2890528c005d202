//! Latency-aware spatio-temporal disease forecasting: location graph,
//! revision-aware data pipeline, the LatencyNet model, and the experiment
//! harness around it.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod geo;
pub mod model;

pub use error::{Error, Result};
