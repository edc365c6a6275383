//! Planted-signal knowledge bases.
//!
//! Every entity owns a unit code `c_e ∈ R^D`. Its description has `n_tokens` positions; a
//! random subset of `informative` positions carries `L·c_e`, the rest carry the codes of
//! random other entities. `L` is a fixed `D_t×D` lift with orthonormal columns. Each position
//! `p` also carries a fixed positional code `r_p`, drawn orthogonal to the lift's range when
//! `D_t > D`. The image patches of entity `e` repeat visual markers `m_p` of its informative
//! positions, so an adaptor that matches patch markers to positional codes can read `c_e` out
//! of the right tokens. Pooled image vectors are noisy copies of `c_e` and queries are
//! `c_e + noise`.
//!
//! In confusable mode entities come in pairs that share patches, pooled vectors and
//! informative positions while their codes differ, so only the text tells partners apart.

use super::Split;
use crate::error::{Error, Result};
use crate::kb::{FeatureBundle, QueryRecord, StoreDims};
use crate::retrieval::IndexShard;
use crate::tensor::Matrix;
use crate::vgka::{PatchFeatures, TokenEmbeddings};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_entities: usize,
    /// Entities `0..n_seen` get training queries; the rest form the unseen split.
    pub n_seen: usize,
    /// Training queries per seen entity.
    pub train_queries: usize,
    /// Evaluation queries per entity, in both splits.
    pub eval_queries: usize,
    pub images: usize,
    pub d_model: usize,
    pub d_text: usize,
    pub n_patches: usize,
    pub n_tokens: usize,
    /// Informative token positions per entity.
    pub informative: usize,
    /// Size of the pool of informative-position sets that entities draw from; 0 gives every
    /// entity (or pair) its own set. A small pool keeps patches from identifying entities.
    pub patterns: usize,
    /// Codes are drawn from a random subspace of this dimension; 0 uses all of `R^D`. A rank
    /// well below the seen-entity count lets the seen split determine the text-to-code map.
    pub code_rank: usize,
    /// Std-norm of the noise added to query codes (noise vector has expected norm this).
    pub query_noise: f64,
    /// Same, for token, patch and pooled features.
    pub feature_noise: f64,
    /// Weight of the positional code in each token.
    pub position_scale: f64,
    /// Weight of the image's pooled vector, seen through a fixed random rotation, in every
    /// patch. Gives the adaptor a purely visual cue; in confusable mode that cue is shared
    /// within a pair.
    pub visual_content: f64,
    pub confusable: bool,
    /// Weight of the shared pair direction in a confusable code.
    pub pair_share: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_entities: 256,
            n_seen: 64,
            train_queries: 20,
            eval_queries: 4,
            images: 2,
            d_model: 64,
            d_text: 96,
            n_patches: 16,
            n_tokens: 32,
            informative: 12,
            patterns: 8,
            code_rank: 16,
            query_noise: 0.5,
            feature_noise: 0.1,
            position_scale: 1.0,
            visual_content: 0.0,
            confusable: false,
            pair_share: 0.8,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_entities", self.n_entities),
            ("images", self.images),
            ("d_model", self.d_model),
            ("d_text", self.d_text),
            ("n_patches", self.n_patches),
            ("n_tokens", self.n_tokens),
            ("informative", self.informative),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.n_seen > self.n_entities {
            return Err(Error::Config(format!(
                "n_seen {} exceeds n_entities {}",
                self.n_seen, self.n_entities
            )));
        }
        if self.informative > self.n_tokens {
            return Err(Error::Config(format!(
                "{} informative positions in {} tokens",
                self.informative, self.n_tokens
            )));
        }
        if self.code_rank > self.d_model {
            return Err(Error::Config(format!(
                "code_rank {} exceeds d_model {}",
                self.code_rank, self.d_model
            )));
        }
        if self.d_text < self.d_model {
            return Err(Error::Config(format!(
                "d_text {} < d_model {}: the code lift needs orthonormal columns",
                self.d_text, self.d_model
            )));
        }
        let min_entities = if self.confusable { 4 } else { 2 };
        if self.informative < self.n_tokens && self.n_entities < min_entities {
            return Err(Error::Config(format!(
                "distractor tokens need at least {min_entities} entities"
            )));
        }
        if self.confusable && !self.n_entities.is_multiple_of(2) {
            return Err(Error::Config(
                "confusable mode needs an even entity count".into(),
            ));
        }
        for (name, v) in [
            ("query_noise", self.query_noise),
            ("feature_noise", self.feature_noise),
            ("position_scale", self.position_scale),
            ("visual_content", self.visual_content),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.pair_share) {
            return Err(Error::Config("pair_share must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> StoreDims {
        StoreDims {
            d_model: self.d_model,
            d_text: self.d_text,
            n_t_max: self.n_tokens,
        }
    }

    /// Confusable pairs with a shared visual cue, many seen entities and few queries each, so
    /// a visual cluster of queries spans several entities.
    pub fn confusable_pairs(seed: u64) -> Self {
        Self {
            n_seen: 192,
            train_queries: 4,
            visual_content: 1.0,
            confusable: true,
            seed,
            ..Self::default()
        }
    }

    pub fn entity_id(i: usize) -> String {
        format!("E{i:06}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthKb {
    pub dims: StoreDims,
    pub bundles: Vec<FeatureBundle>,
    pub codes: Vec<Vec<f32>>,
    pub train: Vec<QueryRecord>,
    pub eval: Vec<QueryRecord>,
}

/// Gaussian vector with expected norm 1.
fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let s = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * s)
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = gauss(rng, n);
    normalize(&mut v);
    v
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Extends an orthonormal `basis` of `R^dim` to `target` vectors by Gram-Schmidt on Gaussian
/// draws.
fn extend_orthonormal(
    rng: &mut ChaCha8Rng,
    mut basis: Vec<Vec<f64>>,
    dim: usize,
    target: usize,
) -> Vec<Vec<f64>> {
    while basis.len() < target {
        let mut v = gauss(rng, dim);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                axpy(&mut v, -c, b);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Draws a knowledge base from `spec`. Single-threaded, so the output depends on the seed only.
pub fn gen_synthetic_kb(spec: &SynthSpec) -> Result<SynthKb> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, dt, nt, np) = (spec.d_model, spec.d_text, spec.n_tokens, spec.n_patches);
    let fnoise = spec.feature_noise;

    let lift = extend_orthonormal(&mut rng, Vec::new(), dt, d); // columns of L
    let complement =
        (dt > d).then(|| extend_orthonormal(&mut rng, lift.clone(), dt, dt).split_off(d));
    let positions: Vec<Vec<f64>> = (0..nt)
        .map(|_| match &complement {
            Some(basis) => {
                let coef = unit(&mut rng, basis.len());
                let mut v = vec![0.0; dt];
                for (c, b) in coef.iter().zip(basis) {
                    axpy(&mut v, *c, b);
                }
                v
            }
            None => unit(&mut rng, dt),
        })
        .collect();
    let markers: Vec<Vec<f64>> = (0..nt).map(|_| unit(&mut rng, d)).collect();
    let rotation = extend_orthonormal(&mut rng, Vec::new(), d, d);
    let code_basis = match spec.code_rank {
        0 => None,
        r => Some(extend_orthonormal(&mut rng, Vec::new(), d, r)),
    };
    let draw_code = |rng: &mut ChaCha8Rng| match &code_basis {
        Some(b) => {
            let coef = unit(rng, b.len());
            let mut v = vec![0.0; d];
            for (c, col) in coef.iter().zip(b) {
                axpy(&mut v, *c, col);
            }
            v
        }
        None => unit(rng, d),
    };

    // codes; in confusable mode pair j = entities (2j, 2j+1)
    let n = spec.n_entities;
    let partner = |e: usize| if spec.confusable { Some(e ^ 1) } else { None };
    let mut pair_dirs = Vec::new();
    let codes: Vec<Vec<f64>> = if spec.confusable {
        let a = spec.pair_share;
        let b = (1.0 - a * a).max(0.0).sqrt();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n / 2 {
            let g = draw_code(&mut rng);
            for _ in 0..2 {
                let mut c: Vec<f64> = g.iter().map(|x| a * x).collect();
                axpy(&mut c, b, &draw_code(&mut rng));
                normalize(&mut c);
                out.push(c);
            }
            pair_dirs.push(g);
        }
        out
    } else {
        (0..n).map(|_| draw_code(&mut rng)).collect()
    };
    let lifted = |c: &[f64]| -> Vec<f64> {
        let mut v = vec![0.0; dt];
        for (ci, col) in c.iter().zip(&lift) {
            axpy(&mut v, *ci, col);
        }
        v
    };

    // visual side, shared within a confusable pair
    struct Visual {
        subset: Vec<usize>,
        images: Vec<PatchFeatures<f32>>,
        pooled: Vec<Vec<f32>>,
    }
    let draw_subset = |rng: &mut ChaCha8Rng| {
        let mut s = sample(rng, nt, spec.informative).into_vec();
        s.sort_unstable();
        s
    };
    let pool: Vec<Vec<usize>> = (0..spec.patterns).map(|_| draw_subset(&mut rng)).collect();
    let make_visual = |rng: &mut ChaCha8Rng, base: &[f64]| -> Result<Visual> {
        let subset = if pool.is_empty() {
            draw_subset(rng)
        } else {
            pool[rng.random_range(0..pool.len())].clone()
        };
        let mut images = Vec::with_capacity(spec.images);
        let mut pooled = Vec::with_capacity(spec.images);
        for _ in 0..spec.images {
            let mut v = base.to_vec();
            axpy(&mut v, fnoise, &gauss(rng, d));
            normalize(&mut v);
            let cue: Vec<f64> = rotation
                .iter()
                .map(|r| spec.visual_content * dot(r, &v))
                .collect();
            let mut data = Vec::with_capacity(np * d);
            for i in 0..np {
                let mut p = markers[subset[i % subset.len()]].clone();
                axpy(&mut p, 1.0, &cue);
                axpy(&mut p, fnoise, &gauss(rng, d));
                data.extend(to_f32(&p));
            }
            images.push(PatchFeatures::new(Matrix::new(np, d, data)?)?);
            pooled.push(to_f32(&v));
        }
        Ok(Visual {
            subset,
            images,
            pooled,
        })
    };
    let mut visuals: Vec<Visual> = Vec::with_capacity(n);
    if spec.confusable {
        for g in &pair_dirs {
            visuals.push(make_visual(&mut rng, g)?);
        }
    } else {
        for c in &codes {
            visuals.push(make_visual(&mut rng, c)?);
        }
    }
    let visual = |e: usize| {
        if spec.confusable {
            &visuals[e / 2]
        } else {
            &visuals[e]
        }
    };

    let mut bundles = Vec::with_capacity(n);
    for e in 0..n {
        let v = visual(e);
        let mut data = Vec::with_capacity(nt * dt);
        for (p, pos) in positions.iter().enumerate() {
            let source = if v.subset.binary_search(&p).is_ok() {
                e
            } else {
                loop {
                    let o = rng.random_range(0..n);
                    if o != e && Some(o) != partner(e) {
                        break o;
                    }
                }
            };
            let mut t = lifted(&codes[source]);
            axpy(&mut t, spec.position_scale, pos);
            axpy(&mut t, fnoise, &gauss(&mut rng, dt));
            data.extend(to_f32(&t));
        }
        bundles.push(FeatureBundle {
            entity_id: SynthSpec::entity_id(e),
            tokens: TokenEmbeddings::dense(Matrix::new(nt, dt, data)?),
            images: v.images.clone(),
            pooled: v.pooled.clone(),
        });
    }

    let query = |rng: &mut ChaCha8Rng, e: usize| {
        let mut q = codes[e].clone();
        axpy(&mut q, spec.query_noise, &gauss(rng, d));
        normalize(&mut q);
        to_f32(&q)
    };
    let split = |e: usize| {
        if e < spec.n_seen {
            Split::Seen
        } else {
            Split::Unseen
        }
    };
    let mut train = Vec::with_capacity(spec.n_seen * spec.train_queries);
    for e in 0..spec.n_seen {
        for _ in 0..spec.train_queries {
            train.push(QueryRecord {
                query_id: format!("train-{:07}", train.len()),
                entity_id: SynthSpec::entity_id(e),
                split: Split::Seen,
                vector: query(&mut rng, e),
            });
        }
    }
    let mut eval = Vec::with_capacity(n * spec.eval_queries);
    for e in 0..n {
        for _ in 0..spec.eval_queries {
            eval.push(QueryRecord {
                query_id: format!("eval-{:07}", eval.len()),
                entity_id: SynthSpec::entity_id(e),
                split: split(e),
                vector: query(&mut rng, e),
            });
        }
    }
    Ok(SynthKb {
        dims: spec.dims(),
        bundles,
        codes: codes.iter().map(|c| to_f32(c)).collect(),
        train,
        eval,
    })
}

/// Index over the pooled image vectors themselves: the image-only nearest-neighbor baseline.
pub fn pooled_index(bundles: &[FeatureBundle]) -> Result<IndexShard> {
    let d = bundles
        .first()
        .map(|b| b.pooled[0].len())
        .ok_or_else(|| Error::Config("no entities".into()))?;
    let rows = bundles
        .iter()
        .enumerate()
        .flat_map(|(e, b)| {
            b.pooled
                .iter()
                .enumerate()
                .map(move |(i, v)| (e as u32, i as u32, v.clone()))
        })
        .collect();
    IndexShard::from_rows(
        bundles.iter().map(|b| b.entity_id.clone()).collect(),
        rows,
        d,
    )
}
