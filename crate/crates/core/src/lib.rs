//! Federated exemplar-based anomaly detection for multivariate time series.

pub mod client;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod exdnn;
pub mod fedserver;
pub mod model;
pub mod numkernel;
pub mod orchestrator;
