//! Simulator for personalized multimodal federated learning: personalized
//! weighted local aggregation, unsupervised modality alignment and
//! attention-based fusion, alongside FedAvg and FedProx baselines.

// `!(x > 0.0)` is how validation rejects NaN along with the bad range
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod federation;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod selftest;
mod seed;

pub use error::{Error, Result};
pub use seed::derive_seed;
