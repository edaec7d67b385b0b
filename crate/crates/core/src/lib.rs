//! Partial visual-semantic embeddings.
//!
//! Images arrive as grids of backbone features plus a segmentation label
//! map; tags are atomic vocabulary entries. The model embeds both into one
//! space whose dimensions are split into per-part blocks, so queries can be
//! restricted to chosen parts.

pub mod artifact;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod loss;
pub mod par;
pub mod partmap;
pub mod query;
pub mod train;

pub use error::{Error, Result};
