//! Visually clustered minibatches and hard-negative synthesis.
//!
//! Batches are packed from k-means clusters of the query vectors so in-batch negatives are
//! visually close. Each sample then receives synthetic negatives: its own primary image paired
//! with the description of another in-batch entity. A greedy matcher swaps the easiest
//! in-batch negatives for the hardest synthetics.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{dot, Matrix, Real};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KMEANS_MAX_ITERS: usize = 50;
pub const KMEANS_TOL: f64 = 1e-4;

/// Result of clustering: one cluster id per point and the `K×D` centroids.
#[derive(Debug, Clone)]
pub struct ClusterPlan {
    pub assignments: Vec<usize>,
    pub centroids: Matrix<f32>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

impl ClusterPlan {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    /// Point indices of every cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &c) in self.assignments.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lower index.
fn nearest(point: &[f32], centroids: &Matrix<f32>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(points: &Matrix<f32>, k: usize, rng: &mut ChaCha8Rng) -> Matrix<f32> {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // all remaining points coincide with a centre; take any unchosen index
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let rows: Vec<Vec<f32>> = chosen.iter().map(|&i| points.row(i).to_vec()).collect();
    Matrix::from_rows(&rows).expect("rows share a width")
}

/// k-means++ seeding followed by Lloyd iterations, stopping after
/// [`KMEANS_MAX_ITERS`] rounds or when no centroid moves more than [`KMEANS_TOL`].
///
/// Points are expected to be unit vectors, where squared Euclidean distance is an affine
/// function of cosine distance. An emptied cluster is reseeded with the point farthest from
/// its current centroid. Deterministic in `seed`.
pub fn kmeans_cluster(points: &Matrix<f32>, k: usize, seed: u64) -> Result<ClusterPlan> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "k-means needs 1 <= k <= N, got k={k}, N={n}"
        )));
    }
    let d = points.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        iterations += 1;
        let near = par::map_range(n, |i| nearest(points.row(i), &centroids));
        for (a, (c, _)) in assignments.iter_mut().zip(&near) {
            *a = *c;
        }
        let mut sums = vec![0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v as f64;
            }
        }
        let mut next = Matrix::<f32>::zeros(k, d);
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| near[a].1.total_cmp(&near[b].1).then(b.cmp(&a)))
                    .unwrap_or(0);
                next.row_mut(c).copy_from_slice(points.row(far));
                assignments[far] = c;
                continue;
            }
            for (o, &s) in next.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                *o = (s / counts[c] as f64) as f32;
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    let near = par::map_range(n, |i| nearest(points.row(i), &centroids));
    let inertia = near.iter().map(|&(_, d)| d).sum();
    let assignments = near.into_iter().map(|(c, _)| c).collect();
    Ok(ClusterPlan {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

/// `K = ceil(N / B)`.
pub fn cluster_count(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1)).max(1)
}

/// Packs samples into batches of `batch_size`.
///
/// Cluster order and the members within each cluster are shuffled. Each cluster is emitted as
/// contiguous batches, so an oversized cluster is split; its partial last batch is topped up
/// from the clusters with the nearest centroids that still have members. A trailing batch of
/// one sample is merged into an earlier batch.
///
/// With `entity_of`, no batch holds two samples of the same entity: a clashing sample is
/// deferred to a later batch, and samples that cannot be placed that way join the earliest
/// batch without their entity.
pub fn build_batches(
    plan: &ClusterPlan,
    batch_size: usize,
    seed: u64,
    entity_of: Option<&[usize]>,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size must be >= 2, got {batch_size}"
        )));
    }
    let n = plan.assignments.len();
    if let Some(e) = entity_of {
        if e.len() != n {
            return Err(Error::Dimension(format!(
                "{} entity labels for {n} samples",
                e.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members = plan.members();
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    let k = plan.k();
    let mut clusters: Vec<usize> = (0..k).collect();
    clusters.shuffle(&mut rng);
    let mut left: Vec<std::collections::VecDeque<usize>> =
        members.into_iter().map(Into::into).collect();
    let mut order = Vec::with_capacity(n);
    for &c in &clusters {
        while left[c].len() >= batch_size {
            order.extend(left[c].drain(..batch_size));
        }
        if left[c].is_empty() {
            continue;
        }
        let mut short = batch_size - left[c].len();
        order.extend(left[c].drain(..));
        let here = plan.centroids.row(c);
        let mut donors: Vec<(f64, usize)> = (0..k)
            .filter(|&o| !left[o].is_empty())
            .map(|o| (sq_dist(here, plan.centroids.row(o)), o))
            .collect();
        donors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, o) in donors {
            let take = short.min(left[o].len());
            order.extend(left[o].drain(..take));
            short -= take;
            if short == 0 {
                break;
            }
        }
    }

    let mut batches: Vec<Vec<usize>> = match entity_of {
        None => order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
        Some(ent) => pack_distinct(&order, ent, batch_size),
    };
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap_or_default();
        for s in tail {
            let home = match entity_of {
                Some(ent) => batches
                    .iter()
                    .rposition(|b| b.iter().all(|&j| ent[j] != ent[s]))
                    .unwrap_or(batches.len() - 1),
                None => batches.len() - 1,
            };
            batches[home].push(s);
        }
    }
    Ok(batches)
}

fn pack_distinct(order: &[usize], ent: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut queue: std::collections::VecDeque<usize> = order.iter().copied().collect();
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut stranded = Vec::new();
    while !queue.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut deferred = Vec::new();
        while batch.len() < batch_size {
            let Some(s) = queue.pop_front() else { break };
            if batch.iter().any(|&j| ent[j] == ent[s]) {
                deferred.push(s);
            } else {
                batch.push(s);
            }
        }
        for s in deferred.into_iter().rev() {
            queue.push_front(s);
        }
        if batch.len() < 2 && !queue.is_empty() {
            // only one entity left in the queue
            stranded.extend(batch);
            stranded.extend(queue.drain(..));
            break;
        }
        batches.push(batch);
    }
    for s in stranded {
        match batches
            .iter()
            .position(|b| b.iter().all(|&j| ent[j] != ent[s]))
        {
            Some(b) => batches[b].push(s),
            None => batches.push(vec![s]),
        }
    }
    batches
}

/// For every sample `i` of a batch of `batch_len`, `n_sync` distinct donor positions drawn
/// uniformly without replacement from the other positions.
pub fn assign_synthetics(batch_len: usize, n_sync: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_len == 0 || n_sync > batch_len - 1 {
        return Err(Error::Config(format!(
            "n_sync {n_sync} exceeds batch size {batch_len} minus one"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..batch_len)
        .map(|i| {
            index::sample(&mut rng, batch_len - 1, n_sync)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect()
        })
        .collect())
}

/// One negative slot after hard-negative selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegSlot {
    /// Kept in-batch negative, by position in the originals list.
    Original(usize),
    /// Synthetic negative, by position in the synthetics list.
    Synthetic(usize),
}

/// Which original slot was replaced by which synthetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Replacement {
    pub slot: usize,
    pub synthetic: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSelection {
    /// Same length and slot order as the originals.
    pub slots: Vec<NegSlot>,
    pub replacements: Vec<Replacement>,
}

/// Greedy hard-negative substitution on precomputed similarities to the query.
///
/// Originals are visited easiest first and synthetics hardest first. The easiest remaining
/// original is replaced by the hardest remaining synthetic only while the synthetic is
/// strictly more similar, each synthetic at most once. Equal similarities are ordered by
/// index.
pub fn select_by_similarity<T: Real>(orig_sims: &[T], synth_sims: &[T]) -> NegativeSelection {
    let mut orig: Vec<usize> = (0..orig_sims.len()).collect();
    orig.sort_by(|&a, &b| {
        orig_sims[a]
            .partial_cmp(&orig_sims[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut syn: Vec<usize> = (0..synth_sims.len()).collect();
    syn.sort_by(|&a, &b| {
        synth_sims[b]
            .partial_cmp(&synth_sims[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut slots: Vec<NegSlot> = (0..orig_sims.len()).map(NegSlot::Original).collect();
    let mut replacements = Vec::new();
    for (&o, &s) in orig.iter().zip(&syn) {
        if synth_sims[s] > orig_sims[o] {
            slots[o] = NegSlot::Synthetic(s);
            replacements.push(Replacement {
                slot: o,
                synthetic: s,
            });
        } else {
            break;
        }
    }
    NegativeSelection {
        slots,
        replacements,
    }
}

/// [`select_by_similarity`] with similarities taken as dot products against the unit query.
pub fn select_hard_negatives<T: Real>(
    query: &[T],
    originals: &[&[T]],
    synthetics: &[&[T]],
) -> NegativeSelection {
    let o: Vec<T> = originals.iter().map(|v| dot(query, v)).collect();
    let s: Vec<T> = synthetics.iter().map(|v| dot(query, v)).collect();
    select_by_similarity(&o, &s)
}

/// Mean pairwise dot product between the query vectors inside each batch, averaged over pairs.
pub fn mean_intra_batch_similarity(queries: &Matrix<f32>, batches: &[Vec<usize>]) -> f64 {
    let (mut sum, mut pairs) = (0f64, 0usize);
    for b in batches {
        for (x, &i) in b.iter().enumerate() {
            for &j in &b[x + 1..] {
                sum += dot(queries.row(i), queries.row(j)) as f64;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}
