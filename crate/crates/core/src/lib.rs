//! Simulator for hierarchical federated anomaly detection over underwater
//! acoustic sensor networks.

pub mod autoenc;
pub mod channel;
pub mod compression;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod grid;
pub mod metrics;
pub mod seeds;
pub mod topology;

pub use error::{Error, Result};
