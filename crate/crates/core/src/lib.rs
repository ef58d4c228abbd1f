//! Paged KV-cache retrieval for long-context transformer inference at desk
//! scale: bookmark-indexed pages, a trainable per-layer page retriever, a
//! tiered KV store, and the two training stages that teach the retriever and
//! adapt the model to sparse attention.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod paging;
pub mod recipes;
pub mod retriever;
pub mod suites;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
