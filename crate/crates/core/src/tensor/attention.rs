//! Multi-head scaled dot-product attention with a key validity mask.

use super::ops::{masked_softmax_rows, softmax_rows_backward};
use super::{Matrix, Real};
use crate::error::{Error, Result};

/// Projection weights of one attention block, each `D×D`. No biases.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
}

/// Gradients produced by [`mha_backward`].
#[derive(Clone, Debug)]
pub struct AttentionGrads<T> {
    pub d_query: Matrix<T>,
    pub d_key: Matrix<T>,
    pub d_value: Matrix<T>,
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
}

/// Activations from [`mha_forward`].
#[derive(Clone, Debug)]
pub struct MhaCache<T> {
    query_in: Matrix<T>,
    key_in: Matrix<T>,
    value_in: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Per-head attention probabilities, `N_q×N_kv`.
    probs: Vec<Matrix<T>>,
    concat: Matrix<T>,
    heads: usize,
    key_valid: usize,
}

impl<T> MhaCache<T> {
    /// Attention probabilities of each head.
    pub fn probabilities(&self) -> &[Matrix<T>] {
        &self.probs
    }
}

/// Multi-head attention: queries `N_q×D`, keys/values `N_kv×D`, output `N_q×D`.
///
/// Logits are scaled by `1/sqrt(D/heads)`. Key rows at or beyond `key_valid` are padding and
/// get an additive `-inf` logit.
pub fn mha_forward<T: Real>(
    query: &Matrix<T>,
    key: &Matrix<T>,
    value: &Matrix<T>,
    key_valid: usize,
    weights: &AttentionWeights<T>,
    heads: usize,
) -> Result<(Matrix<T>, MhaCache<T>)> {
    let d = query.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model dim {d} is not divisible by {heads} heads"
        )));
    }
    if key.cols() != d || value.cols() != d || key.rows() != value.rows() {
        return Err(Error::Dimension(format!(
            "attention inputs: query {}x{}, key {}x{}, value {}x{}",
            query.rows(),
            d,
            key.rows(),
            key.cols(),
            value.rows(),
            value.cols()
        )));
    }
    let key_valid = key_valid.min(key.rows());
    if key_valid == 0 {
        return Err(Error::Degenerate("attention over zero valid keys".into()));
    }
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();

    let q = query.matmul(&weights.w_q)?;
    let k = key.matmul(&weights.w_k)?;
    let v = value.matmul(&weights.w_v)?;

    let mut concat = Matrix::zeros(query.rows(), d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.column_block(h * dh, dh);
        let kh = k.column_block(h * dh, dh);
        let vh = v.column_block(h * dh, dh);
        let logits = qh.matmul(&kh.transpose())?.scale(scale);
        let p = masked_softmax_rows(&logits, key_valid);
        concat.set_column_block(h * dh, &p.matmul(&vh)?);
        probs.push(p);
    }
    let out = concat.matmul(&weights.w_o)?;
    Ok((
        out,
        MhaCache {
            query_in: query.clone(),
            key_in: key.clone(),
            value_in: value.clone(),
            q,
            k,
            v,
            probs,
            concat,
            heads,
            key_valid,
        },
    ))
}

/// Reverse pass of [`mha_forward`] for upstream gradient `d_out` (`N_q×D`).
pub fn mha_backward<T: Real>(
    cache: &MhaCache<T>,
    weights: &AttentionWeights<T>,
    d_out: &Matrix<T>,
) -> Result<AttentionGrads<T>> {
    if d_out.shape() != (cache.query_in.rows(), cache.query_in.cols()) {
        return Err(Error::Internal(format!(
            "attention backward got a {}x{} gradient for a {}x{} output",
            d_out.rows(),
            d_out.cols(),
            cache.query_in.rows(),
            cache.query_in.cols()
        )));
    }
    let d = cache.query_in.cols();
    let dh = d / cache.heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();

    let g_w_o = cache.concat.transpose().matmul(d_out)?;
    let d_concat = d_out.matmul(&weights.w_o.transpose())?;

    let mut d_q = Matrix::zeros(cache.q.rows(), d);
    let mut d_k = Matrix::zeros(cache.k.rows(), d);
    let mut d_v = Matrix::zeros(cache.v.rows(), d);
    for (h, p) in cache.probs.iter().enumerate() {
        let qh = cache.q.column_block(h * dh, dh);
        let kh = cache.k.column_block(h * dh, dh);
        let vh = cache.v.column_block(h * dh, dh);
        let d_oh = d_concat.column_block(h * dh, dh);

        let d_p = d_oh.matmul(&vh.transpose())?;
        let d_vh = p.transpose().matmul(&d_oh)?;
        let mut d_logits = softmax_rows_backward(p, &d_p);
        d_logits.scale_in_place(scale);
        let d_qh = d_logits.matmul(&kh)?;
        let d_kh = d_logits.transpose().matmul(&qh)?;

        d_q.set_column_block(h * dh, &d_qh);
        d_k.set_column_block(h * dh, &d_kh);
        d_v.set_column_block(h * dh, &d_vh);
    }
    debug_assert!(cache.key_valid <= cache.k.rows());

    Ok(AttentionGrads {
        d_query: d_q.matmul(&weights.w_q.transpose())?,
        d_key: d_k.matmul(&weights.w_k.transpose())?,
        d_value: d_v.matmul(&weights.w_v.transpose())?,
        w_q: cache.query_in.transpose().matmul(&d_q)?,
        w_k: cache.key_in.transpose().matmul(&d_k)?,
        w_v: cache.value_in.transpose().matmul(&d_v)?,
        w_o: g_w_o,
    })
}
