//! Traffic-aware taxi hotspot placement.
//!
//! The pipeline builds a hotspot graph with demand, event and congestion
//! features, shrinks the action space to a k-hop dominating set, learns node
//! embeddings with a mean-aggregation message-passing network, discretizes
//! them with k-means and trains a tabular Q-learning agent on a
//! wait/distance/congestion reward.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod eval;
pub mod geodata;
pub mod gnn;
pub mod graph;
pub mod persist;
pub mod pipeline;
pub mod rl;
pub mod states;
pub mod traffic;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use geodata::{haversine_km, GeoPoint, Hotspot, Request};
pub use pipeline::{Pipeline, Recommender, Stage};
pub use rl::Method;
