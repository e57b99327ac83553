//! Ranks A/B-test copy variants by relative click-through rate and explains
//! the ranking in terms of named marketing attributes.

pub mod api;
mod error;

pub mod attributes;
pub mod bundle;
pub mod embedding;
pub mod evaluation;
pub mod impact;
pub mod indices;
pub mod ingest;
pub mod narration;
pub mod pipeline;
pub mod projection;
pub mod ranker;
pub mod ranking;
pub mod synthetic;

pub use error::{Error, Result};
