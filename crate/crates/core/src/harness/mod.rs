//! Experiment orchestration: configs, corpus, training and ablations.

pub mod ablation;
pub mod config;
pub mod corpus;
pub mod draft;
pub mod gradsuite;
pub mod stats;
pub mod train;
