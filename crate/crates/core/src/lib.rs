//! Cluster-branch-train-merge for language models at desk scale.
//!
//! A corpus is embedded with tf-idf + truncated SVD, partitioned with balanced
//! k-means, and one expert language model is trained per cluster in isolated
//! workers. At inference the experts are mixed with weights derived from the
//! distance between the running context and each cluster center.

pub mod btm;
pub mod budget;
pub mod cli;
pub mod cluster;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod lm;
pub mod route;
pub mod store;

pub use error::{Error, ErrorCategory, Result};
