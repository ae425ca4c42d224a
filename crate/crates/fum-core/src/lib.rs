//! Fine-grained user modeling for news recommendation.
//!
//! Builds a user embedding two ways and fuses them: a fine-grained model
//! runs linear-cost additive attention over the concatenated token
//! sequence of everything the user clicked, and a coarse-grained model
//! runs self-attention over whole-news embeddings. Candidates are ranked
//! by inner product, trained with a pairwise ranking loss, and evaluated
//! with AUC / MRR / nDCG. News and user vectors are cacheable so serving
//! is a dot product.

pub mod attention;
pub mod bench;
pub mod cache;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod news;
pub mod optim;
pub mod store;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod user;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
