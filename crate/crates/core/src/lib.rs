//! Memory-efficient embedding compression for click-through-rate models.
//!
//! A small CTR model first learns dense feature embeddings. Those embeddings
//! are then product-quantized into shared codebooks, with popularity-weighted
//! entropy regularization and contrastive hard negatives keeping code usage
//! balanced. Finally a downstream CTR model is retrained on top of the
//! compressed codebook.

mod binio;
pub mod data;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod quantizer;
pub mod error;
pub mod seed;

pub use error::{ConfigError, Error, Result};
