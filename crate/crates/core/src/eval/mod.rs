//! Evaluation: ranking metrics, downstream classifiers, and experiments.

pub mod downstream;
pub mod experiment;
pub mod metrics;
