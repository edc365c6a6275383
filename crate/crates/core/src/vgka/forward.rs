//! Forward and reverse passes through the adaptor graph:
//! token projection, `L` cross-attention decoder blocks with patch rows as queries,
//! mean pooling over the output rows and L2 normalization.

use super::params::{AdaptorParams, Guidance, LayerParams};
use super::{PatchFeatures, TokenEmbeddings};
use crate::error::{Error, Result};
use crate::tensor::{
    gelu, gelu_backward, l2_normalize, l2_normalize_backward, layer_norm, layer_norm_backward,
    mean_pool, mean_pool_backward, mha_backward, mha_forward, LayerNormCache, Matrix, MhaCache,
    Real,
};

pub(crate) const LN_EPS: f64 = 1e-5;

struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    mha: MhaCache<T>,
    ln2: LayerNormCache<T>,
    ln2_out: Matrix<T>,
    hidden_pre: Matrix<T>,
    hidden: Matrix<T>,
}

/// Everything the reverse pass needs from one forward pass.
pub struct AdaptorCache<T> {
    guidance: Guidance,
    tokens: Matrix<T>,
    valid_len: usize,
    blocks: Vec<BlockCache<T>>,
    pooled_rows: usize,
    pooled_norm: T,
    embedding: Vec<T>,
}

impl<T: Real> AdaptorCache<T> {
    pub fn embedding(&self) -> &[T] {
        &self.embedding
    }

    /// Attention probabilities of every head in block `layer`.
    pub fn attention(&self, layer: usize) -> Option<&[Matrix<T>]> {
        self.blocks.get(layer).map(|b| b.mha.probabilities())
    }
}

/// `T_t = tokens · w_proj`, one `D`-wide row per (raw, possibly padded) token.
pub fn project_tokens<T: Real>(
    txt: &TokenEmbeddings<T>,
    params: &AdaptorParams<T>,
) -> Result<Matrix<T>> {
    if txt.tokens.cols() != params.config.d_text {
        return Err(Error::Config(format!(
            "token width {} does not match adaptor d_text {}",
            txt.tokens.cols(),
            params.config.d_text
        )));
    }
    txt.tokens.matmul(&params.w_proj)
}

fn block_forward<T: Real>(
    layer: &LayerParams<T>,
    x: &Matrix<T>,
    text: &Matrix<T>,
    valid_len: usize,
    heads: usize,
) -> Result<(Matrix<T>, BlockCache<T>)> {
    let eps = T::lit(LN_EPS);
    let (a, ln1) = layer_norm(x, &layer.ln1_gamma, &layer.ln1_beta, eps)?;
    let (m, mha) = mha_forward(&a, text, text, valid_len, &layer.attn, heads)?;
    let x1 = x.add(&m)?;
    let (b, ln2) = layer_norm(&x1, &layer.ln2_gamma, &layer.ln2_beta, eps)?;
    let mut hidden_pre = b.matmul(&layer.ff_w1)?;
    hidden_pre.add_row_broadcast(&layer.ff_b1)?;
    let hidden = gelu(&hidden_pre);
    let mut f = hidden.matmul(&layer.ff_w2)?;
    f.add_row_broadcast(&layer.ff_b2)?;
    let out = x1.add(&f)?;
    Ok((
        out,
        BlockCache {
            ln1,
            mha,
            ln2,
            ln2_out: b,
            hidden_pre,
            hidden,
        },
    ))
}

/// Reverse pass of one block. Accumulates weight gradients into `g` and `dL/dtext` into
/// `d_text`; returns `dL/dx`.
fn block_backward<T: Real>(
    layer: &LayerParams<T>,
    cache: &BlockCache<T>,
    d_out: &Matrix<T>,
    g: &mut LayerParams<T>,
    d_text: &mut Matrix<T>,
) -> Result<Matrix<T>> {
    // feed-forward branch
    g.ff_w2
        .add_assign(&cache.hidden.transpose().matmul(d_out)?)?;
    g.ff_b2.add_assign(&d_out.sum_rows())?;
    let d_hidden = d_out.matmul(&layer.ff_w2.transpose())?;
    let d_pre = gelu_backward(&cache.hidden_pre, &d_hidden);
    g.ff_w1
        .add_assign(&cache.ln2_out.transpose().matmul(&d_pre)?)?;
    g.ff_b1.add_assign(&d_pre.sum_rows())?;
    let d_b = d_pre.matmul(&layer.ff_w1.transpose())?;
    let (d_x1_ln, d_g2, d_be2) = layer_norm_backward(&cache.ln2, &layer.ln2_gamma, &d_b);
    g.ln2_gamma.add_assign(&d_g2)?;
    g.ln2_beta.add_assign(&d_be2)?;
    let d_x1 = d_out.add(&d_x1_ln)?;

    // attention branch
    let ag = mha_backward(&cache.mha, &layer.attn, &d_x1)?;
    g.attn.w_q.add_assign(&ag.w_q)?;
    g.attn.w_k.add_assign(&ag.w_k)?;
    g.attn.w_v.add_assign(&ag.w_v)?;
    g.attn.w_o.add_assign(&ag.w_o)?;
    d_text.add_assign(&ag.d_key)?;
    d_text.add_assign(&ag.d_value)?;
    let (d_x_ln, d_g1, d_be1) = layer_norm_backward(&cache.ln1, &layer.ln1_gamma, &ag.d_query);
    g.ln1_gamma.add_assign(&d_g1)?;
    g.ln1_beta.add_assign(&d_be1)?;
    d_x1.add(&d_x_ln)
}

/// Forward pass keeping activations for [`adaptor_backward`]. Returns the unit-norm embedding.
pub fn adaptor_forward_cached<T: Real>(
    img: &PatchFeatures<T>,
    txt: &TokenEmbeddings<T>,
    params: &AdaptorParams<T>,
) -> Result<AdaptorCache<T>> {
    let cfg = &params.config;
    if img.patches.cols() != cfg.d_model {
        return Err(Error::Config(format!(
            "patch width {} does not match adaptor d_model {}",
            img.patches.cols(),
            cfg.d_model
        )));
    }
    if img.patches.rows() == 0 {
        return Err(Error::Degenerate("entity image has no patches".into()));
    }
    let valid_len = txt.valid_len.min(txt.tokens.rows());
    if valid_len == 0 {
        return Err(Error::Degenerate("entity text has no valid tokens".into()));
    }

    let (pooled, pooled_rows, blocks) = match cfg.guidance {
        Guidance::TextOnly => {
            let text = project_tokens(txt, params)?;
            let valid = text.truncate_rows(valid_len);
            (mean_pool(&valid)?, valid_len, Vec::new())
        }
        Guidance::Both | Guidance::ImageOnly => {
            let text = if cfg.guidance == Guidance::ImageOnly {
                Matrix::zeros(txt.tokens.rows(), cfg.d_model)
            } else {
                project_tokens(txt, params)?
            };
            let mut x = img.patches.clone();
            let mut blocks = Vec::with_capacity(params.layers.len());
            for layer in &params.layers {
                let (next, cache) = block_forward(layer, &x, &text, valid_len, cfg.heads)?;
                blocks.push(cache);
                x = next;
            }
            (mean_pool(&x)?, x.rows(), blocks)
        }
    };
    let (embedding, pooled_norm) = l2_normalize(&pooled)
        .map_err(|_| Error::Degenerate("adaptor output pooled to the zero vector".into()))?;
    Ok(AdaptorCache {
        guidance: cfg.guidance,
        tokens: txt.tokens.clone(),
        valid_len,
        blocks,
        pooled_rows,
        pooled_norm,
        embedding,
    })
}

/// Unit-norm entity embedding for one (image, description) pair.
pub fn adaptor_forward<T: Real>(
    img: &PatchFeatures<T>,
    txt: &TokenEmbeddings<T>,
    params: &AdaptorParams<T>,
) -> Result<Vec<T>> {
    Ok(adaptor_forward_cached(img, txt, params)?.embedding)
}

/// Reverse pass: accumulates `dL/dparams` into `grads` for upstream `d_embedding`.
pub fn adaptor_backward<T: Real>(
    params: &AdaptorParams<T>,
    cache: &AdaptorCache<T>,
    d_embedding: &[T],
    grads: &mut AdaptorParams<T>,
) -> Result<()> {
    if d_embedding.len() != cache.embedding.len()
        || cache.blocks.len()
            != if cache.guidance == Guidance::TextOnly {
                0
            } else {
                params.layers.len()
            }
        || grads.config != params.config
    {
        return Err(Error::Internal(
            "adaptor backward called with a cache from a different forward".into(),
        ));
    }
    let d = params.config.d_model;
    let d_pooled = l2_normalize_backward(&cache.embedding, cache.pooled_norm, d_embedding);
    let d_rows = mean_pool_backward(&d_pooled, cache.pooled_rows);

    let mut d_text = Matrix::zeros(cache.tokens.rows(), d);
    match cache.guidance {
        Guidance::TextOnly => {
            for i in 0..cache.valid_len {
                d_text.row_mut(i).copy_from_slice(d_rows.row(i));
            }
        }
        Guidance::Both | Guidance::ImageOnly => {
            let mut dx = d_rows;
            for ((layer, bc), g) in params
                .layers
                .iter()
                .zip(&cache.blocks)
                .zip(grads.layers.iter_mut())
                .rev()
            {
                dx = block_backward(layer, bc, &dx, g, &mut d_text)?;
            }
        }
    }
    if cache.guidance != Guidance::ImageOnly {
        grads
            .w_proj
            .add_assign(&cache.tokens.transpose().matmul(&d_text)?)?;
    }
    Ok(())
}
