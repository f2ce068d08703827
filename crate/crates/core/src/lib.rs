//! Attention-based encoder-decoder networks that learn segmentation for
//! categories with only image-level labels by transferring a
//! category-agnostic decoder trained on a disjoint set of annotated
//! categories.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
