//! The per-batch training objective: adaptor forward for positives and synthetics,
//! hard-negative substitution, InfoNCE and the reverse pass back into the adaptor.

use super::loss::infonce_loss;
use crate::batch::{select_hard_negatives, NegSlot};
use crate::error::{Error, Result};
use crate::kb::{FeatureBundle, QueryRecord};
use crate::par;
use crate::tensor::{dot, Real};
use crate::vgka::{
    adaptor_backward, adaptor_forward_cached, embed_query, AdaptorCache, AdaptorParams,
    PatchFeatures, TokenEmbeddings,
};
use serde::Serialize;
use std::collections::HashMap;

/// Lower bound on the temperature.
pub const MIN_TAU: f64 = 0.01;
/// Backward passes are summed in fixed groups of this many samples, then the group sums are
/// added in order, so gradients do not depend on the thread count.
const GRAD_GROUP: usize = 4;

/// Entity inputs used during training: the primary image and the description.
#[derive(Debug, Clone)]
pub struct EntityInput<T> {
    pub image: PatchFeatures<T>,
    pub text: TokenEmbeddings<T>,
}

#[derive(Debug, Clone)]
pub struct TrainQuery<T> {
    /// Unit-norm pooled query feature.
    pub vector: Vec<T>,
    /// Index into [`TrainData::entities`].
    pub entity: usize,
}

#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub entity_ids: Vec<String>,
    pub entities: Vec<EntityInput<T>>,
    pub queries: Vec<TrainQuery<T>>,
}

impl<T: Real> TrainData<T> {
    /// Pairs every query with its entity; unknown entity ids are an ingestion error.
    pub fn new(bundles: &[FeatureBundle], queries: &[QueryRecord]) -> Result<Self> {
        let index: HashMap<&str, usize> = bundles
            .iter()
            .enumerate()
            .map(|(i, b)| (b.entity_id.as_str(), i))
            .collect();
        let entities = bundles
            .iter()
            .map(|b| EntityInput {
                image: b.primary().cast(),
                text: b.tokens.cast(),
            })
            .collect();
        let queries = queries
            .iter()
            .map(|q| {
                let entity = *index.get(q.entity_id.as_str()).ok_or_else(|| {
                    Error::Ingestion(format!(
                        "query {} refers to unknown entity {:?}",
                        q.query_id, q.entity_id
                    ))
                })?;
                let v: Vec<T> = q.vector.iter().map(|&x| T::lit(x as f64)).collect();
                Ok(TrainQuery {
                    vector: embed_query(&v)?.vector,
                    entity,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entity_ids: bundles.iter().map(|b| b.entity_id.clone()).collect(),
            entities,
            queries,
        })
    }
}

/// Query indices of one minibatch and, per position, the batch positions donating text to
/// its synthetic negatives.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainBatch {
    pub samples: Vec<usize>,
    pub donors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ObjectiveOptions {
    /// Treat synthetic negatives as constants in the reverse pass.
    pub detach_synthetics: bool,
    /// Skip the reverse pass entirely.
    pub forward_only: bool,
}

#[derive(Debug, Clone)]
pub struct BatchObjective<T> {
    pub loss: T,
    pub tau: T,
    pub grads: AdaptorParams<T>,
    /// Gradient with respect to the log logit scale `ln(1/τ)`; zero while τ is clamped.
    pub d_log_scale: T,
    pub replaced: usize,
    pub negative_slots: usize,
    pub synthetics: usize,
}

/// `τ = max(exp(−log_scale), MIN_TAU)`.
pub fn tau_from_log_scale<T: Real>(log_scale: T) -> (T, bool) {
    let tau = (-log_scale).exp();
    let floor = T::lit(MIN_TAU);
    if tau < floor {
        (floor, true)
    } else {
        (tau, false)
    }
}

enum Job {
    Pos(usize),
    Syn(usize, usize),
}

/// Loss and parameter gradients for one batch.
///
/// Negatives of sample `i` are the other in-batch positives of a different entity. Its
/// synthetics pair `i`'s primary image with each donor's description, skipping donors of the
/// same entity. Greedy hard-negative substitution then decides the final negative set.
pub fn batch_objective<T: Real>(
    data: &TrainData<T>,
    batch: &TrainBatch,
    params: &AdaptorParams<T>,
    log_scale: T,
    opts: ObjectiveOptions,
) -> Result<BatchObjective<T>> {
    let b = batch.samples.len();
    if b < 2 || batch.donors.len() != b {
        return Err(Error::Config(format!(
            "batch of {b} samples with {} donor lists",
            batch.donors.len()
        )));
    }
    let ent: Vec<usize> = batch
        .samples
        .iter()
        .map(|&s| data.queries[s].entity)
        .collect();

    let mut jobs: Vec<Job> = (0..b).map(Job::Pos).collect();
    let mut syn_of: Vec<Vec<usize>> = vec![Vec::new(); b];
    for i in 0..b {
        for &j in &batch.donors[i] {
            if j >= b || j == i {
                return Err(Error::Config(format!(
                    "invalid donor {j} for batch position {i}"
                )));
            }
            if ent[j] != ent[i] {
                syn_of[i].push(jobs.len());
                jobs.push(Job::Syn(i, j));
            }
        }
    }
    let caches: Vec<AdaptorCache<T>> = par::map_slice(&jobs, |job| {
        let (img, txt) = match *job {
            Job::Pos(i) => (ent[i], ent[i]),
            Job::Syn(i, j) => (ent[i], ent[j]),
        };
        adaptor_forward_cached(&data.entities[img].image, &data.entities[txt].text, params)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let emb = |k: usize| caches[k].embedding();

    let queries: Vec<&[T]> = batch
        .samples
        .iter()
        .map(|&s| data.queries[s].vector.as_slice())
        .collect();
    let mut neg_refs: Vec<Vec<usize>> = Vec::with_capacity(b);
    let (mut replaced, mut slots) = (0, 0);
    for i in 0..b {
        let originals: Vec<usize> = (0..b).filter(|&j| ent[j] != ent[i]).collect();
        let o: Vec<&[T]> = originals.iter().map(|&j| emb(j)).collect();
        let s: Vec<&[T]> = syn_of[i].iter().map(|&k| emb(k)).collect();
        let sel = select_hard_negatives(queries[i], &o, &s);
        replaced += sel.replacements.len();
        slots += originals.len();
        neg_refs.push(
            sel.slots
                .iter()
                .map(|slot| match *slot {
                    NegSlot::Original(k) => originals[k],
                    NegSlot::Synthetic(k) => syn_of[i][k],
                })
                .collect(),
        );
    }

    let (tau, clamped) = tau_from_log_scale(log_scale);
    let positives: Vec<&[T]> = (0..b).map(emb).collect();
    let negatives: Vec<Vec<&[T]>> = neg_refs
        .iter()
        .map(|r| r.iter().map(|&k| emb(k)).collect())
        .collect();
    let nce = infonce_loss(&queries, &positives, &negatives, tau)?;
    let d_log_scale = if clamped { T::zero() } else { -tau * nce.d_tau };

    let mut grads = params.zeros_like();
    if !opts.forward_only {
        let d = params.config.d_model;
        let mut d_emb: Vec<Vec<T>> = vec![vec![T::zero(); d]; jobs.len()];
        for i in 0..b {
            add_into(&mut d_emb[i], &nce.d_pos[i]);
            for (k, &r) in neg_refs[i].iter().enumerate() {
                add_into(&mut d_emb[r], &nce.d_neg[i][k]);
            }
        }
        let active: Vec<usize> = (0..jobs.len())
            .filter(|&k| {
                k < b || (!opts.detach_synthetics && d_emb[k].iter().any(|&g| g != T::zero()))
            })
            .collect();
        let groups = active.len().div_ceil(GRAD_GROUP);
        let partial: Vec<Result<AdaptorParams<T>>> = par::map_range(groups, |g| {
            let mut acc = params.zeros_like();
            for &k in &active[g * GRAD_GROUP..((g + 1) * GRAD_GROUP).min(active.len())] {
                adaptor_backward(params, &caches[k], &d_emb[k], &mut acc)?;
            }
            Ok(acc)
        });
        for p in partial {
            grads.add_assign(&p?)?;
        }
    }
    Ok(BatchObjective {
        loss: nce.loss,
        tau,
        grads,
        d_log_scale,
        replaced,
        negative_slots: slots,
        synthetics: jobs.len() - b,
    })
}

fn add_into<T: Real>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Mean pairwise dot product of the batch's query vectors.
pub fn batch_query_similarity<T: Real>(data: &TrainData<T>, batch: &TrainBatch) -> f64 {
    let s = &batch.samples;
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, &i) in s.iter().enumerate() {
        for &j in &s[x + 1..] {
            sum += dot(&data.queries[i].vector, &data.queries[j].vector).as_f64();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
