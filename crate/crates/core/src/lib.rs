//! Federated fine-tuning simulator with truncated-SVD adapters and adaptive
//! rank allocation.
//!
//! Clients train low-rank adapters on a frozen base model, vote on which rank
//! triplets matter, and the server arbitrates a shrinking global mask that
//! prunes both communication and local computation.

pub mod adapters;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod numerics;
pub mod rank_alloc;
pub mod trainer;

pub use error::{Error, Result};
