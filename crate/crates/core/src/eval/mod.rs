//! Retrieval metrics, embedding diagnostics, the planted-signal generator and the ablation
//! harness.

mod ablation;
mod synth;

pub use ablation::{
    ablation_run, default_ablation_configs, AblationConfig, AblationRow, AblationTable,
    PairwiseComparison,
};
pub use synth::{gen_synthetic_kb, pooled_index, SynthKb, SynthSpec};

use crate::error::{Error, Result};
use crate::kb::{QueryRecord, Split};
use crate::par;
use crate::retrieval::{IndexShard, SearchMode};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

/// `2su/(s+u)`, or 0 when both are 0. Works for fractions and percentages alike.
pub fn harmonic_mean(seen: f64, unseen: f64) -> Result<f64> {
    if !(seen >= 0.0 && unseen >= 0.0) || !seen.is_finite() || !unseen.is_finite() {
        return Err(Error::Config(format!(
            "harmonic mean needs finite non-negative rates, got ({seen}, {unseen})"
        )));
    }
    if seen + unseen == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * seen * unseen / (seen + unseen))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub seen: usize,
    pub unseen: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when the split has no queries.
    pub top1_seen: Option<f64>,
    pub top1_unseen: Option<f64>,
    pub top1_overall: f64,
    /// `None` when either split is absent.
    pub hm: Option<f64>,
    /// Recall@K keyed by K.
    pub recall: BTreeMap<usize, f64>,
    pub counts: SplitCounts,
    /// Human-readable notes about absent splits or undefined metrics.
    pub flags: Vec<String>,
}

/// 1-based rank of each query's ground truth within the top `k_max`, or `None` if it is
/// further down. Queries run in parallel; order of the output follows `queries`.
pub fn ground_truth_ranks(
    index: &IndexShard,
    queries: &[QueryRecord],
    k_max: usize,
    mode: SearchMode,
) -> Result<Vec<Option<usize>>> {
    let known: HashSet<&str> = index.entity_ids.iter().map(String::as_str).collect();
    if let Some(q) = queries
        .iter()
        .find(|q| !known.contains(q.entity_id.as_str()))
    {
        return Err(Error::NotFound(format!(
            "ground truth {} of query {} is not in the index",
            q.entity_id, q.query_id
        )));
    }
    par::map_slice(queries, |q| {
        let r = index.search(&q.vector, k_max, mode)?;
        Ok(r.hits
            .iter()
            .position(|h| h.entity_id == q.entity_id)
            .map(|p| p + 1))
    })
    .into_iter()
    .collect()
}

pub fn eval_retrieval(
    index: &IndexShard,
    queries: &[QueryRecord],
    ks: &[usize],
    mode: SearchMode,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Config("no queries to evaluate".into()));
    }
    if ks.contains(&0) {
        return Err(Error::Config("recall cut-offs must be >= 1".into()));
    }
    let k_max = ks.iter().copied().max().unwrap_or(1).max(1);
    let ranks = ground_truth_ranks(index, queries, k_max, mode)?;
    let top1 = |split: Option<Split>| -> (usize, usize) {
        let mut n = 0;
        let mut hit = 0;
        for (q, r) in queries.iter().zip(&ranks) {
            if split.is_none_or(|s| q.split == s) {
                n += 1;
                hit += (*r == Some(1)) as usize;
            }
        }
        (hit, n)
    };
    let rate = |(h, n): (usize, usize)| (n > 0).then(|| h as f64 / n as f64);
    let (seen, unseen, all) = (
        top1(Some(Split::Seen)),
        top1(Some(Split::Unseen)),
        top1(None),
    );
    let mut flags = Vec::new();
    let top1_seen = rate(seen);
    let top1_unseen = rate(unseen);
    if top1_seen.is_none() {
        flags.push("seen split absent".to_string());
    }
    if top1_unseen.is_none() {
        flags.push("unseen split absent".to_string());
    }
    let hm = match (top1_seen, top1_unseen) {
        (Some(s), Some(u)) => Some(harmonic_mean(s, u)?),
        _ => {
            flags.push("hm undefined".to_string());
            None
        }
    };
    let recall = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count();
            (k, hits as f64 / queries.len() as f64)
        })
        .collect();
    Ok(EvalReport {
        top1_seen,
        top1_unseen,
        top1_overall: all.0 as f64 / all.1 as f64,
        hm,
        recall,
        counts: SplitCounts {
            seen: seen.1,
            unseen: unseen.1,
            total: all.1,
        },
        flags,
    })
}

/// Mean silhouette with cosine distance `1 − cos`. Samples alone in their cluster score 0.
pub fn silhouette_score(embeddings: &Matrix<f32>, labels: &[usize]) -> Result<f64> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Config(
            "silhouette needs at least two distinct labels".into(),
        ));
    }
    let slot: BTreeMap<usize, usize> = distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let lab: Vec<usize> = labels.iter().map(|l| slot[l]).collect();
    let mut sizes = vec![0usize; distinct.len()];
    for &l in &lab {
        sizes[l] += 1;
    }
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = embeddings.row(i);
            let nrm = r.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if !(nrm > 0.0) || !nrm.is_finite() {
                return Err(Error::Degenerate(format!("embedding {i} has norm {nrm}")));
            }
            Ok(r.iter().map(|&x| x as f64 / nrm).collect())
        })
        .collect::<Result<_>>()?;
    let per: Vec<f64> = par::map_range(n, |i| {
        if sizes[lab[i]] == 1 {
            return 0.0;
        }
        let mut sum = vec![0.0f64; sizes.len()];
        for j in 0..n {
            if j != i {
                let c: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
                sum[lab[j]] += 1.0 - c;
            }
        }
        let a = sum[lab[i]] / (sizes[lab[i]] - 1) as f64;
        let b = (0..sizes.len())
            .filter(|&c| c != lab[i])
            .map(|c| sum[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            (b - a) / m
        } else {
            0.0
        }
    });
    Ok(per.iter().sum::<f64>() / n as f64)
}

/// Mean silhouette over query neighborhoods. Each query contributes the image rows of its
/// top `k` entities, labeled by entity; neighborhoods with a single entity are skipped.
pub fn neighborhood_silhouette(
    index: &IndexShard,
    queries: &[QueryRecord],
    k: usize,
    mode: SearchMode,
) -> Result<f64> {
    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); index.entity_ids.len()];
    for (r, rr) in index.row_map.iter().enumerate() {
        rows_of[rr.entity as usize].push(r);
    }
    let slot: std::collections::HashMap<&str, usize> = index
        .entity_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let scores: Vec<Option<f64>> = par::map_slice(queries, |q| {
        let hits = index.search(&q.vector, k, mode)?.hits;
        if hits.len() < 2 {
            return Ok(None);
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for h in &hits {
            let e = slot[h.entity_id.as_str()];
            for &r in &rows_of[e] {
                data.extend_from_slice(index.rows.row(r));
                labels.push(e);
            }
        }
        let m = Matrix::new(labels.len(), index.dim(), data)?;
        silhouette_score(&m, &labels).map(Some)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let valid: Vec<f64> = scores.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::Config(
            "no query neighborhood holds two entities".into(),
        ));
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

/// Silhouette of index rows labeled by entity, restricted to `entities` when given.
pub fn index_silhouette(index: &IndexShard, entities: Option<&HashSet<String>>) -> Result<f64> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (r, rr) in index.row_map.iter().enumerate() {
        let id = &index.entity_ids[rr.entity as usize];
        if entities.is_none_or(|s| s.contains(id)) {
            data.extend_from_slice(index.rows.row(r));
            labels.push(rr.entity as usize);
        }
    }
    let m = Matrix::new(labels.len(), index.dim(), data)?;
    silhouette_score(&m, &labels)
}
