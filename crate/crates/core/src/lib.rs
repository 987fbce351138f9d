//! Deterministic simulator of federated contrastive training for
//! place-recognition retrieval.
//!
//! Clients hold geo-tagged feature datasets and train a shared embedding
//! model with a triplet loss, mining positives and hard negatives only from
//! their own database. A server aggregates the returned parameters with
//! FedAvg, a pseudo-gradient optimizer, FedVC virtual clients, or a two-tier
//! hierarchy, and retrieval quality is measured as recall@K.

pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod geo;
pub mod hierarchy;
pub mod kmeans;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod partition;
pub mod report;
pub mod retrieval;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
