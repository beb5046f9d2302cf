//! Speaker consent management for contrastive speaker recognition.
//!
//! Speakers are grouped into buckets, each with its own utterance encoder.
//! A shared classifier is trained on a bounded replay buffer of embeddings,
//! so registering or removing a speaker only retrains the affected buckets.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod datastore;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod registrar;
pub mod remover;
pub mod rng;
pub mod sampler;
pub mod trainer;
pub mod types;

pub use error::{ConsentError, Result};
pub use types::*;
