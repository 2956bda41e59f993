//! Student interaction graphs from collaborative-coding logs, a graph
//! transformer with weighted edge features for grade prediction, and a
//! perturbation-based Bayesian-network explainer.

pub mod diffcore;
pub mod graphgen;
pub mod ingest;
pub mod model;
pub mod train;
pub mod explainer;
pub mod pipeline;
pub mod synth;
