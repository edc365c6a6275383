//! The vision-guided knowledge adaptor.
//!
//! Entity description tokens are projected into the shared space and read by cross-attention
//! blocks whose queries are the entity image's patch features. The output rows are mean pooled
//! and L2 normalized, so every entity embedding is a unit vector and cosine similarity is a
//! plain dot product downstream. Query images take a frozen pass-through path.

mod forward;
mod params;

pub use forward::{
    adaptor_backward, adaptor_forward, adaptor_forward_cached, project_tokens, AdaptorCache,
};
pub use params::{init_params, xavier_bound, AdaptorConfig, AdaptorParams, Guidance, LayerParams};

use crate::error::{Error, Result};
use crate::tensor::{l2_normalize, Matrix, Real};
use serde::{Deserialize, Serialize};

/// Default cap on description length in tokens.
pub const DEFAULT_N_T_MAX: usize = 256;

/// Frozen patch features of one entity image, `N_p×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures<T = f32> {
    pub patches: Matrix<T>,
}

impl<T: Real> PatchFeatures<T> {
    pub fn new(patches: Matrix<T>) -> Result<Self> {
        if patches.rows() == 0 {
            return Err(Error::Dimension(
                "patch features need at least one row".into(),
            ));
        }
        Ok(Self { patches })
    }

    pub fn cast<U: Real>(&self) -> PatchFeatures<U> {
        PatchFeatures {
            patches: self.patches.cast(),
        }
    }
}

/// Frozen token embeddings of an entity description, `N_t×D_t`, with rows at and past
/// `valid_len` treated as padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings<T = f32> {
    pub tokens: Matrix<T>,
    pub valid_len: usize,
}

impl<T: Real> TokenEmbeddings<T> {
    pub fn new(tokens: Matrix<T>, valid_len: usize) -> Result<Self> {
        if valid_len > tokens.rows() {
            return Err(Error::Dimension(format!(
                "valid_len {valid_len} exceeds {} token rows",
                tokens.rows()
            )));
        }
        Ok(Self { tokens, valid_len })
    }

    /// All rows valid.
    pub fn dense(tokens: Matrix<T>) -> Self {
        let valid_len = tokens.rows();
        Self { tokens, valid_len }
    }

    pub fn cast<U: Real>(&self) -> TokenEmbeddings<U> {
        TokenEmbeddings {
            tokens: self.tokens.cast(),
            valid_len: self.valid_len,
        }
    }
}

/// Unit-norm embedding of one (entity, image) pair; the unit of indexing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityEmbedding {
    pub vector: Vec<f32>,
    pub entity_id: String,
    pub image_id: u32,
}

/// Unit-norm query image representation.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding<T = f32> {
    pub vector: Vec<T>,
}

/// Query images bypass the adaptor: the pooled feature is only normalized.
pub fn embed_query<T: Real>(pooled: &[T]) -> Result<QueryEmbedding<T>> {
    if pooled.is_empty() {
        return Err(Error::Dimension("query vector is empty".into()));
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "query vector has non-finite entries".into(),
        ));
    }
    let (vector, _) = l2_normalize(pooled)?;
    Ok(QueryEmbedding { vector })
}
