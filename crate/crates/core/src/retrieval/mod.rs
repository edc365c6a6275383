//! Entity search over precomputed adaptor embeddings.
//!
//! Every (entity, image) pair becomes one unit row of an [`IndexShard`]. A query is scored
//! against rows by dot product, each entity keeps its best-scoring image, and the top `k`
//! entities are returned. The flat scan is the reference; an IVF coarse quantizer can
//! restrict the scan to the lists nearest the query.

mod format;

pub use format::{load_index, save_index, validate_index, INDEX_MAGIC, INDEX_VERSION};

use crate::batch::kmeans_cluster;
use crate::error::{Error, Result};
use crate::kb::FeatureBundle;
use crate::par;
use crate::tensor::Matrix;
use crate::vgka::{adaptor_forward, embed_query, AdaptorParams};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::Instant;

/// Allowed deviation of an index row from unit norm.
pub const ROW_NORM_TOL: f32 = 1e-5;
/// Rows scored per parallel task.
const SCAN_CHUNK: usize = 4096;

/// Dot product with eight independent accumulators, combined in a fixed order.
#[inline]
pub fn score_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Which entity images get rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageMode {
    /// One row per entity image; entity score is the max over its images.
    #[default]
    All,
    /// Primary image only.
    Primary,
}

impl ImageMode {
    pub fn code(self) -> u8 {
        match self {
            ImageMode::All => 0,
            ImageMode::Primary => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ImageMode::All),
            1 => Some(ImageMode::Primary),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowRef {
    pub entity: u32,
    pub image: u32,
}

/// Coarse quantizer: k-means centroids over the rows and the member rows of each list.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    pub centroids: Matrix<f32>,
    /// Row ids per list, ascending.
    pub lists: Vec<Vec<u32>>,
    /// Default number of lists to probe.
    pub n_probe: usize,
}

impl IvfIndex {
    pub fn n_lists(&self) -> usize {
        self.lists.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexShard {
    pub entity_ids: Vec<String>,
    /// `M×D` unit rows.
    pub rows: Matrix<f32>,
    pub row_map: Vec<RowRef>,
    pub image_mode: ImageMode,
    pub ivf: Option<IvfIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub entity_id: String,
    pub score: f32,
    /// Image of the entity that produced the score.
    pub image_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
    pub latency_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SearchMode {
    #[default]
    Exact,
    Ivf {
        n_probe: usize,
    },
}

impl IndexShard {
    pub fn empty(dim: usize, image_mode: ImageMode) -> Self {
        Self {
            entity_ids: Vec::new(),
            rows: Matrix::zeros(0, dim),
            row_map: Vec::new(),
            image_mode,
            ivf: None,
        }
    }

    /// Builds a shard from explicit rows, normalizing each one.
    pub fn from_rows(
        entity_ids: Vec<String>,
        rows: Vec<(u32, u32, Vec<f32>)>,
        dim: usize,
    ) -> Result<Self> {
        let mut shard = Self::empty(dim, ImageMode::All);
        shard.entity_ids = entity_ids;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (e, i, v) in rows {
            if v.len() != dim {
                return Err(Error::Dimension(format!(
                    "row of length {} in a {dim}-d index",
                    v.len()
                )));
            }
            if e as usize >= shard.entity_ids.len() {
                return Err(Error::Dimension(format!(
                    "row refers to entity {e} of {}",
                    shard.entity_ids.len()
                )));
            }
            data.extend(embed_query(&v)?.vector);
            shard.row_map.push(RowRef {
                entity: e,
                image: i,
            });
        }
        shard.rows = Matrix::new(shard.row_map.len(), dim, data)?;
        Ok(shard)
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn len(&self) -> usize {
        self.row_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_map.is_empty()
    }

    /// Adds the k-means coarse quantizer. `n_lists` must not exceed the row count.
    pub fn build_ivf(&mut self, n_lists: usize, n_probe: usize, seed: u64) -> Result<()> {
        if n_lists == 0 || n_lists > self.len() {
            return Err(Error::Config(format!(
                "n_lists must be in 1..={} (row count), got {n_lists}",
                self.len()
            )));
        }
        if n_probe == 0 || n_probe > n_lists {
            return Err(Error::Config(format!(
                "n_probe must be in 1..={n_lists}, got {n_probe}"
            )));
        }
        let plan = kmeans_cluster(&self.rows, n_lists, seed)?;
        let mut lists = vec![Vec::new(); n_lists];
        for (r, &c) in plan.assignments.iter().enumerate() {
            lists[c].push(r as u32);
        }
        self.ivf = Some(IvfIndex {
            centroids: plan.centroids,
            lists,
            n_probe,
        });
        Ok(())
    }

    fn check_query(&self, h: &[f32], k: usize) -> Result<Vec<f32>> {
        if self.is_empty() {
            return Err(Error::Config("index is empty".into()));
        }
        if k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if h.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "query of length {} against a {}-d index",
                h.len(),
                self.dim()
            )));
        }
        Ok(embed_query(h)?.vector)
    }

    /// Exact search: scans every row. `k` larger than the entity count returns all entities.
    pub fn query(&self, h: &[f32], k: usize) -> Result<RetrievalResult> {
        let start = Instant::now();
        let q = self.check_query(h, k)?;
        let rows = &self.rows;
        let d = self.dim();
        let n_chunks = self.len().div_ceil(SCAN_CHUNK);
        let chunks: Vec<Vec<f32>> = par::map_range(n_chunks, |c| {
            let lo = c * SCAN_CHUNK;
            let hi = (lo + SCAN_CHUNK).min(self.len());
            rows.data()[lo * d..hi * d]
                .chunks_exact(d)
                .map(|r| score_dot(&q, r))
                .collect()
        });
        let mut best = vec![(f32::NEG_INFINITY, u32::MAX); self.entity_ids.len()];
        let mut r = 0u32;
        for s in chunks.iter().flatten() {
            self.offer(&mut best, r, *s);
            r += 1;
        }
        Ok(self.finish(best, k, start))
    }

    /// IVF search over the `n_probe` lists whose centroids are nearest the query.
    pub fn query_ivf(&self, h: &[f32], k: usize, n_probe: usize) -> Result<RetrievalResult> {
        let start = Instant::now();
        let ivf = self
            .ivf
            .as_ref()
            .ok_or_else(|| Error::Config("index has no IVF quantizer".into()))?;
        let q = self.check_query(h, k)?;
        let n_probe = n_probe.clamp(1, ivf.n_lists());
        // ‖q − c‖² = 1 − 2 q·c + ‖c‖² for unit q
        let mut order: Vec<(f32, usize)> = (0..ivf.n_lists())
            .map(|c| {
                let cr = ivf.centroids.row(c);
                (score_dot(cr, cr) - 2.0 * score_dot(&q, cr), c)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut best = vec![(f32::NEG_INFINITY, u32::MAX); self.entity_ids.len()];
        for &(_, c) in &order[..n_probe] {
            for &r in &ivf.lists[c] {
                self.offer(&mut best, r, score_dot(&q, self.rows.row(r as usize)));
            }
        }
        Ok(self.finish(best, k, start))
    }

    pub fn search(&self, h: &[f32], k: usize, mode: SearchMode) -> Result<RetrievalResult> {
        match mode {
            SearchMode::Exact => self.query(h, k),
            SearchMode::Ivf { n_probe } => self.query_ivf(h, k, n_probe),
        }
    }

    /// Per-entity max; on equal scores the lower row wins.
    #[inline]
    fn offer(&self, best: &mut [(f32, u32)], r: u32, s: f32) {
        let slot = &mut best[self.row_map[r as usize].entity as usize];
        if s > slot.0 || (s == slot.0 && r < slot.1) {
            *slot = (s, r);
        }
    }

    fn finish(&self, best: Vec<(f32, u32)>, k: usize, start: Instant) -> RetrievalResult {
        let mut cand: Vec<(f32, u32, u32)> = best
            .into_iter()
            .enumerate()
            .filter(|(_, (_, r))| *r != u32::MAX)
            .map(|(e, (s, r))| (s, e as u32, r))
            .collect();
        let ids = &self.entity_ids;
        let cmp = |a: &(f32, u32, u32), b: &(f32, u32, u32)| {
            b.0.total_cmp(&a.0)
                .then_with(|| ids[a.1 as usize].cmp(&ids[b.1 as usize]))
        };
        let k = k.min(cand.len());
        if k > 0 && k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_by(cmp);
        let hits = cand
            .into_iter()
            .map(|(s, e, r)| Hit {
                entity_id: ids[e as usize].clone(),
                score: s,
                image_id: self.row_map[r as usize].image,
            })
            .collect();
        RetrievalResult {
            hits,
            latency_ns: start.elapsed().as_nanos() as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedOptions {
    pub image_mode: ImageMode,
    /// Entities per parallel chunk; the progress callback fires after each chunk.
    pub chunk: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            image_mode: ImageMode::All,
            chunk: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmbedReport {
    pub entities: usize,
    pub rows: usize,
    /// Entities reused from a partial shard.
    pub resumed: usize,
    /// `(entity_id, reason)` of entities left out.
    pub skipped: Vec<(String, String)>,
}

/// Embeds every (entity, image) pair with the adaptor, in store order.
///
/// Entities whose rows already exist in `resume` are copied instead of recomputed, so an
/// interrupted run can continue from its last saved partial shard. `on_chunk` sees the
/// partial shard after each chunk along with `(done, total)`. Entities the adaptor rejects as
/// degenerate are skipped and listed in the report.
pub fn embed_kb(
    bundles: &[FeatureBundle],
    params: &AdaptorParams<f32>,
    opts: EmbedOptions,
    resume: Option<&IndexShard>,
    mut on_chunk: Option<&mut dyn FnMut(&IndexShard, usize, usize) -> Result<()>>,
) -> Result<(IndexShard, EmbedReport)> {
    let d = params.config.d_model;
    let mut shard = IndexShard::empty(d, opts.image_mode);
    let mut report = EmbedReport::default();
    let prior: HashMap<&str, Vec<(u32, &[f32])>> = match resume {
        Some(p) => {
            if p.dim() != d || p.image_mode != opts.image_mode {
                return Err(Error::Config(
                    "partial shard does not match this embedding run".into(),
                ));
            }
            let mut m: HashMap<&str, Vec<(u32, &[f32])>> = HashMap::new();
            for (r, rr) in p.row_map.iter().enumerate() {
                m.entry(p.entity_ids[rr.entity as usize].as_str())
                    .or_default()
                    .push((rr.image, p.rows.row(r)));
            }
            m
        }
        None => HashMap::new(),
    };
    let mut data: Vec<f32> = Vec::new();
    let total = bundles.len();
    let chunk = opts.chunk.max(1);
    for (ci, group) in bundles.chunks(chunk).enumerate() {
        let computed: Vec<Result<Vec<(u32, Vec<f32>)>>> = par::map_slice(group, |b| {
            if let Some(rows) = prior.get(b.entity_id.as_str()) {
                return Ok(rows.iter().map(|(i, v)| (*i, v.to_vec())).collect());
            }
            let n_img = match opts.image_mode {
                ImageMode::All => b.images.len(),
                ImageMode::Primary => 1,
            };
            (0..n_img)
                .map(|i| Ok((i as u32, adaptor_forward(&b.images[i], &b.tokens, params)?)))
                .collect()
        });
        for (b, res) in group.iter().zip(computed) {
            match res {
                Ok(rows) => {
                    if prior.contains_key(b.entity_id.as_str()) {
                        report.resumed += 1;
                    }
                    let e = shard.entity_ids.len() as u32;
                    shard.entity_ids.push(b.entity_id.clone());
                    for (image, v) in rows {
                        data.extend_from_slice(&v);
                        shard.row_map.push(RowRef { entity: e, image });
                    }
                }
                Err(Error::Degenerate(m)) => report.skipped.push((b.entity_id.clone(), m)),
                Err(e) => return Err(e),
            }
        }
        shard.rows = Matrix::new(shard.row_map.len(), d, data.clone())?;
        if let Some(f) = on_chunk.as_mut() {
            f(&shard, ((ci + 1) * chunk).min(total), total)?;
        }
    }
    shard.rows = Matrix::new(shard.row_map.len(), d, data)?;
    report.entities = shard.entity_ids.len();
    report.rows = shard.len();
    Ok((shard, report))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchStats {
    pub queries: usize,
    pub reps: usize,
    pub rows: usize,
    pub threads: usize,
    pub p50_ns: u64,
    pub p95_ns: u64,
    pub mean_ns: u64,
    /// Rows scored per second in the latency loop.
    pub scan_rows_per_sec: f64,
    /// Queries per second when the batch of queries runs in parallel.
    pub throughput_qps: f64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times the full query path (normalize, scan or probe, per-entity max, top-k).
///
/// Latency comes from answering the queries one after another `reps` times. Throughput comes
/// from one extra pass that answers all queries concurrently.
pub fn bench_query(
    index: &IndexShard,
    queries: &[Vec<f32>],
    reps: usize,
    k: usize,
    mode: SearchMode,
) -> Result<BenchStats> {
    let mut stats = BenchStats {
        queries: queries.len(),
        reps,
        rows: index.len(),
        threads: par::current_threads(),
        ..BenchStats::default()
    };
    if reps == 0 || queries.is_empty() {
        return Ok(stats);
    }
    // warm-up
    index.search(&queries[0], k, mode)?;
    let mut samples = Vec::with_capacity(reps * queries.len());
    for _ in 0..reps {
        for q in queries {
            let t = Instant::now();
            let r = index.search(q, k, mode)?;
            std::hint::black_box(&r);
            samples.push(t.elapsed().as_nanos() as u64);
        }
    }
    samples.sort_unstable();
    let total: u64 = samples.iter().sum();
    stats.p50_ns = percentile(&samples, 50.0);
    stats.p95_ns = percentile(&samples, 95.0);
    stats.mean_ns = total / samples.len() as u64;
    stats.scan_rows_per_sec =
        index.len() as f64 * samples.len() as f64 / (total.max(1) as f64 * 1e-9);

    let t = Instant::now();
    let out = par::map_range(queries.len() * reps, |i| {
        index.search(&queries[i % queries.len()], k, mode)
    });
    let secs = t.elapsed().as_secs_f64();
    for r in out {
        r?;
    }
    stats.throughput_qps = (queries.len() * reps) as f64 / secs.max(1e-12);
    Ok(stats)
}

#[cfg(test)]
mod tests;
