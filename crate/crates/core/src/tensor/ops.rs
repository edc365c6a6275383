use super::{Matrix, Real};
use crate::error::{Error, Result};

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Returns `a / ‖a‖` together with `‖a‖`.
pub fn l2_normalize<T: Real>(a: &[T]) -> Result<(Vec<T>, T)> {
    let n = norm(a);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalize a vector with norm {n}"
        )));
    }
    Ok((a.iter().map(|&v| v / n).collect(), n))
}

/// Adjoint of [`l2_normalize`]: given the unit output `y`, the input norm and `dL/dy`,
/// returns `dL/dx = (dy - y (y·dy)) / ‖x‖`.
pub fn l2_normalize_backward<T: Real>(y: &[T], input_norm: T, dy: &[T]) -> Vec<T> {
    let proj = dot(y, dy);
    y.iter()
        .zip(dy)
        .map(|(&yi, &di)| (di - yi * proj) / input_norm)
        .collect()
}

pub fn cosine_sim<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Degenerate(
            "cosine similarity with a zero vector".into(),
        ));
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Column-wise arithmetic mean over rows.
pub fn mean_pool<T: Real>(m: &Matrix<T>) -> Result<Vec<T>> {
    if m.rows() == 0 {
        return Err(Error::Dimension("mean pool over zero rows".into()));
    }
    let mut out = vec![T::zero(); m.cols()];
    for i in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    let n = T::lit(m.rows() as f64);
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Broadcasts `dL/dmean / rows` back to every row.
pub fn mean_pool_backward<T: Real>(d_mean: &[T], rows: usize) -> Matrix<T> {
    let n = T::lit(rows as f64);
    let scaled: Vec<T> = d_mean.iter().map(|&g| g / n).collect();
    let mut out = Matrix::zeros(rows, d_mean.len());
    for i in 0..rows {
        out.row_mut(i).copy_from_slice(&scaled);
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    masked_softmax_rows(m, m.cols())
}

/// Row-wise softmax where columns at or beyond `valid_cols` carry an additive `-inf` logit
/// and therefore receive exactly zero probability.
pub fn masked_softmax_rows<T: Real>(m: &Matrix<T>, valid_cols: usize) -> Matrix<T> {
    let valid = valid_cols.min(m.cols());
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = &m.row(i)[..valid];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let o = out.row_mut(i);
        let mut sum = T::zero();
        for (dst, &v) in o.iter_mut().zip(row) {
            let e = (v - max).exp();
            *dst = e;
            sum += e;
        }
        for dst in &mut o[..valid] {
            *dst /= sum;
        }
    }
    out
}

/// Softmax adjoint: `dx = y ⊙ (dy − rowsum(dy ⊙ y))`.
pub fn softmax_rows_backward<T: Real>(y: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let (yr, dr) = (y.row(i), dy.row(i));
        let s = dot(yr, dr);
        for ((o, &yv), &dv) in out.row_mut(i).iter_mut().zip(yr).zip(dr) {
            *o = yv * (dv - s);
        }
    }
    out
}

/// Activations kept by [`layer_norm`] for its backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: Matrix<T>,
    pub inv_std: Vec<T>,
}

/// Per-row normalization to zero mean and unit (population) variance, then `gamma ⊙ x + beta`.
pub fn layer_norm<T: Real>(
    m: &Matrix<T>,
    gamma: &Matrix<T>,
    beta: &Matrix<T>,
    eps: T,
) -> Result<(Matrix<T>, LayerNormCache<T>)> {
    let d = m.cols();
    if gamma.shape() != (1, d) || beta.shape() != (1, d) {
        return Err(Error::Dimension(format!(
            "layer norm affine params must be 1x{d}"
        )));
    }
    if !(eps > T::zero()) {
        return Err(Error::Config("layer norm eps must be positive".into()));
    }
    let n = T::lit(d as f64);
    let mut normalized = Matrix::zeros(m.rows(), d);
    let mut out = Matrix::zeros(m.rows(), d);
    let mut inv_std = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = m.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xr = normalized.row_mut(i);
        for (x, &v) in xr.iter_mut().zip(row) {
            *x = (v - mean) * is;
        }
        let xr = normalized.row(i);
        for (((o, &x), &g), &b) in out
            .row_mut(i)
            .iter_mut()
            .zip(xr)
            .zip(gamma.data())
            .zip(beta.data())
        {
            *o = g * x + b;
        }
    }
    Ok((
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Matrix<T>,
    dy: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (rows, d) = dy.shape();
    let n = T::lit(d as f64);
    let mut dx = Matrix::zeros(rows, d);
    let mut dgamma = Matrix::zeros(1, d);
    let mut dbeta = Matrix::zeros(1, d);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..rows {
        let (xr, dr) = (cache.normalized.row(i), dy.row(i));
        for j in 0..d {
            dgamma.data_mut()[j] += dr[j] * xr[j];
            dbeta.data_mut()[j] += dr[j];
            dxhat[j] = dr[j] * gamma.data()[j];
        }
        let sum_dxhat: T = dxhat.iter().copied().sum();
        let sum_dxhat_x = dot(&dxhat, xr);
        let scale = cache.inv_std[i] / n;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = scale * (n * dxhat[j] - sum_dxhat - xr[j] * sum_dxhat_x);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Real>(x: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    let (c, a, half, three) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5), T::lit(3.0));
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for ((o, &v), &g) in out.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        let u = c * (v + a * v * v * v);
        let t = u.tanh();
        let du = c * (T::one() + three * a * v * v);
        let deriv = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
        *o = g * deriv;
    }
    out
}
