//! Decision layer for venom-aware species classification, working from
//! precomputed image logits, embeddings and metadata features.
//!
//! The pipeline: [`pca`] reduces metadata features, [`prior`] trains a
//! location prior against class prototypes, [`inference`] combines it with
//! image scores and applies the venomous escalation rule, and [`metrics`]
//! scores the result. [`losses`] and [`optim`] hold the training pieces,
//! [`synthetic`] generates test data.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pca;
pub mod prior;
pub mod synthetic;

pub use error::{Error, FormatError, Result};
pub use format::FeatureMatrix;
