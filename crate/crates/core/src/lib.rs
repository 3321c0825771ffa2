//! Time-filtered positive sampling for implicit-feedback recommenders.
//!
//! The pipeline turns a timestamped interaction log into a multiset of
//! positive pairs whose multiplicities follow interaction recency, then
//! trains BPR embedding models (MF or LightGCN) over it.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod sampling;
pub mod synth;
pub mod tgraph;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
