//! Experiment harness for irregular time-series forecasting with
//! positional embeddings: sweeps, aggregation, probes and property checks.

pub mod aggregate;
pub mod config;
pub mod experiment;
pub mod invariants;
pub mod probe;
pub mod props;
pub mod report;
