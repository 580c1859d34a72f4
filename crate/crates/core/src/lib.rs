//! Temporal entity linking with graph-contrastive entity representations.

pub mod autodiff;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod store;
pub mod synth;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
