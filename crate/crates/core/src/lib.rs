//! Semi-supervised generation of labeled data for target classes that have
//! no direct labels, guided by a class graph over related inexact labels.

pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod generative;
pub mod graph;
pub mod numeric;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
