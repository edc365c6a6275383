use crate::error::{Error, Result};
use crate::tensor::{dot, Real};

/// Loss value and exact gradients of [`infonce_loss`].
#[derive(Debug, Clone)]
pub struct InfoNce<T> {
    pub loss: T,
    pub d_query: Vec<Vec<T>>,
    pub d_pos: Vec<Vec<T>>,
    /// `d_neg[i][k]` is the gradient for the `k`-th negative of query `i`.
    pub d_neg: Vec<Vec<Vec<T>>>,
    pub d_tau: T,
}

/// Query-to-entity InfoNCE with per-query negative sets:
/// `(1/B) Σ_i −log( e^{s_ii/τ} / (e^{s_ii/τ} + Σ_{v ∈ neg_i} e^{s_iv/τ}) )` with `s` the dot
/// product.
pub fn infonce_loss<T: Real>(
    queries: &[&[T]],
    positives: &[&[T]],
    negatives: &[Vec<&[T]>],
    tau: T,
) -> Result<InfoNce<T>> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let b = queries.len();
    if b == 0 || positives.len() != b || negatives.len() != b {
        return Err(Error::Dimension(format!(
            "{b} queries, {} positives, {} negative sets",
            positives.len(),
            negatives.len()
        )));
    }
    let bt = T::lit(b as f64);
    let mut out = InfoNce {
        loss: T::zero(),
        d_query: Vec::with_capacity(b),
        d_pos: Vec::with_capacity(b),
        d_neg: Vec::with_capacity(b),
        d_tau: T::zero(),
    };
    for i in 0..b {
        let h = queries[i];
        let mut sims = Vec::with_capacity(1 + negatives[i].len());
        sims.push(dot(h, positives[i]));
        sims.extend(negatives[i].iter().map(|v| dot(h, v)));
        let z: Vec<T> = sims.iter().map(|&s| s / tau).collect();
        let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = z.iter().map(|&v| (v - zmax).exp()).collect();
        let sum: T = e.iter().copied().sum();
        out.loss += (sum.ln() + zmax - z[0]) / bt;

        // dL/dz_k = (p_k − [k = 0]) / B; dz/ds = 1/τ; dz/dτ = −s/τ²
        let dz: Vec<T> = e
            .iter()
            .enumerate()
            .map(|(k, &ek)| (ek / sum - if k == 0 { T::one() } else { T::zero() }) / bt)
            .collect();
        for (&g, &s) in dz.iter().zip(&sims) {
            out.d_tau -= g * s / (tau * tau);
        }
        let mut dh: Vec<T> = positives[i].iter().map(|&p| dz[0] / tau * p).collect();
        for (k, v) in negatives[i].iter().enumerate() {
            let c = dz[k + 1] / tau;
            for (a, &x) in dh.iter_mut().zip(v.iter()) {
                *a += c * x;
            }
        }
        out.d_query.push(dh);
        out.d_pos.push(h.iter().map(|&x| dz[0] / tau * x).collect());
        out.d_neg.push(
            (0..negatives[i].len())
                .map(|k| h.iter().map(|&x| dz[k + 1] / tau * x).collect())
                .collect(),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn uniform_logits_give_ln_b() {
        let h = [1.0f64, 0.0];
        let v = [0.0f64, 1.0];
        let negs = vec![vec![&v[..]; 3]];
        let l = infonce_loss(&[&h[..]], &[&v[..]], &negs, 0.07).unwrap();
        assert!((l.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturation_goes_to_zero() {
        let h = [1.0f64, 0.0];
        let neg = [-1.0f64, 0.0];
        let negs = vec![vec![&neg[..]; 5]];
        let l = infonce_loss(&[&h[..]], &[&h[..]], &negs, 0.01).unwrap();
        assert!(l.loss < 1e-80);
    }

    #[test]
    fn rejects_bad_tau() {
        let h = [1.0f64];
        assert!(matches!(
            infonce_loss(&[&h[..]], &[&h[..]], &[vec![]], 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, d, n) = (3, 5, 4);
        let q: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, d)).collect();
        let p: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, d)).collect();
        let ng: Vec<Vec<Vec<f64>>> = (0..b)
            .map(|_| (0..n).map(|_| unit(&mut rng, d)).collect())
            .collect();
        let tau = 0.3;
        let eval = |q: &Vec<Vec<f64>>, p: &Vec<Vec<f64>>, ng: &Vec<Vec<Vec<f64>>>, tau: f64| {
            let qr: Vec<&[f64]> = q.iter().map(|v| &v[..]).collect();
            let pr: Vec<&[f64]> = p.iter().map(|v| &v[..]).collect();
            let nr: Vec<Vec<&[f64]>> = ng
                .iter()
                .map(|s| s.iter().map(|v| &v[..]).collect())
                .collect();
            infonce_loss(&qr, &pr, &nr, tau).unwrap()
        };
        let g = eval(&q, &p, &ng, tau);
        let h = 1e-6;
        let check = |fd: f64, an: f64| assert!((fd - an).abs() < 1e-7, "{fd} vs {an}");
        for i in 0..b {
            for j in 0..d {
                let (mut a, mut c) = (q.clone(), q.clone());
                a[i][j] += h;
                c[i][j] -= h;
                check(
                    (eval(&a, &p, &ng, tau).loss - eval(&c, &p, &ng, tau).loss) / (2.0 * h),
                    g.d_query[i][j],
                );
                let (mut a, mut c) = (p.clone(), p.clone());
                a[i][j] += h;
                c[i][j] -= h;
                check(
                    (eval(&q, &a, &ng, tau).loss - eval(&q, &c, &ng, tau).loss) / (2.0 * h),
                    g.d_pos[i][j],
                );
                for k in 0..n {
                    let (mut a, mut c) = (ng.clone(), ng.clone());
                    a[i][k][j] += h;
                    c[i][k][j] -= h;
                    check(
                        (eval(&q, &p, &a, tau).loss - eval(&q, &p, &c, tau).loss) / (2.0 * h),
                        g.d_neg[i][k][j],
                    );
                }
            }
        }
        check(
            (eval(&q, &p, &ng, tau + h).loss - eval(&q, &p, &ng, tau - h).loss) / (2.0 * h),
            g.d_tau,
        );
    }
}
