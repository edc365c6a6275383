//! Knowledge-aware visual entity retrieval.
//!
//! Entity embeddings come from a vision-guided adaptor that reads description tokens with
//! cross-attention driven by image patches. The adaptor is trained with InfoNCE over clustered
//! batches with synthesized hard negatives. Queries keep their frozen pooled image feature, and
//! the embedded knowledge base is searched exactly or through an IVF quantizer.
//!
//! Data-parallel work goes through [`par`]. Without the `parallel` feature it runs sequentially
//! with identical results.

// `!(x > 0.0)` is how NaN is rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
mod codec;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kb;
pub mod par;
pub mod retrieval;
pub mod tensor;
pub mod train;
pub mod vgka;

pub use error::{Error, Result};
