//! Trains a set of configurations on shared synthetic data and tabulates their metrics.

use super::{eval_retrieval, gen_synthetic_kb, neighborhood_silhouette, SynthSpec, DEFAULT_KS};
use crate::error::Result;
use crate::retrieval::{embed_kb, EmbedOptions, SearchMode};
use crate::train::{train, TrainConfig, TrainData, TrainHooks, TrainState};
use crate::vgka::{AdaptorConfig, Guidance};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;

/// Entities per query neighborhood in the silhouette diagnostic.
pub const SILHOUETTE_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub name: String,
    pub guidance: Guidance,
    pub clustered: bool,
    pub synthetic: bool,
}

impl AblationConfig {
    pub fn new(name: &str, guidance: Guidance, clustered: bool, synthetic: bool) -> Self {
        Self {
            name: name.into(),
            guidance,
            clustered,
            synthetic,
        }
    }

    /// Training config for this row: clustering toggled, synthetics off means `n_sync = 0`.
    pub fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            clustered: self.clustered,
            n_sync: if self.synthetic { base.n_sync } else { 0 },
            seed,
            ..base.clone()
        }
    }
}

/// Modality rows (image only, text only) plus the cluster × synthetic grid with both.
pub fn default_ablation_configs() -> Vec<AblationConfig> {
    vec![
        AblationConfig::new("image-only", Guidance::ImageOnly, true, true),
        AblationConfig::new("text-only", Guidance::TextOnly, true, true),
        AblationConfig::new("vanilla", Guidance::Both, false, false),
        AblationConfig::new("cluster", Guidance::Both, true, false),
        AblationConfig::new("synthetic", Guidance::Both, false, true),
        AblationConfig::new("full", Guidance::Both, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub top1_seen: f64,
    pub top1_unseen: f64,
    pub top1_overall: f64,
    pub hm: f64,
    pub recall_at_5: f64,
    /// Mean silhouette of the top-5 neighborhoods of the evaluation queries.
    pub silhouette: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub spec: SynthSpec,
    pub train: TrainConfig,
    pub configs: Vec<AblationConfig>,
    pub rows: Vec<AblationRow>,
}

/// Seed-by-seed comparison of two configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub better: String,
    pub baseline: String,
    pub seeds: usize,
    pub top1_wins: usize,
    pub silhouette_wins: usize,
}

impl AblationTable {
    fn rows_of<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a AblationRow> + 'a {
        self.rows.iter().filter(move |r| r.config == name)
    }

    /// Counts the seeds where `better` strictly beats `baseline`. Overall top-1 is compared.
    pub fn compare(&self, better: &str, baseline: &str) -> PairwiseComparison {
        let (mut seeds, mut top1_wins, mut silhouette_wins) = (0, 0, 0);
        for a in self.rows_of(better) {
            if let Some(b) = self.rows_of(baseline).find(|b| b.seed == a.seed) {
                seeds += 1;
                top1_wins += (a.top1_overall > b.top1_overall) as usize;
                silhouette_wins += (a.silhouette > b.silhouette) as usize;
            }
        }
        PairwiseComparison {
            better: better.into(),
            baseline: baseline.into(),
            seeds,
            top1_wins,
            silhouette_wins,
        }
    }

    /// Fixed-width text table with one line per (config, seed) and per-config means.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "config", "seed", "seen", "unseen", "overall", "hm", "r@5", "silh", "loss"
        );
        let line = |s: &mut String, name: &str, seed: &str, r: [f64; 7]| {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                name, seed, r[0], r[1], r[2], r[3], r[4], r[5], r[6]
            );
        };
        for c in &self.configs {
            let rows: Vec<&AblationRow> = self.rows_of(&c.name).collect();
            for r in &rows {
                line(
                    &mut s,
                    &c.name,
                    &r.seed.to_string(),
                    [
                        r.top1_seen,
                        r.top1_unseen,
                        r.top1_overall,
                        r.hm,
                        r.recall_at_5,
                        r.silhouette,
                        r.final_loss,
                    ],
                );
            }
            if rows.len() > 1 {
                let m = |f: fn(&AblationRow) -> f64| {
                    rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
                };
                line(
                    &mut s,
                    &c.name,
                    "mean",
                    [
                        m(|r| r.top1_seen),
                        m(|r| r.top1_unseen),
                        m(|r| r.top1_overall),
                        m(|r| r.hm),
                        m(|r| r.recall_at_5),
                        m(|r| r.silhouette),
                        m(|r| r.final_loss),
                    ],
                );
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,seed,top1_seen,top1_unseen,top1_overall,hm,recall_at_5,silhouette,final_loss,seconds\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.config,
                r.seed,
                r.top1_seen,
                r.top1_unseen,
                r.top1_overall,
                r.hm,
                r.recall_at_5,
                r.silhouette,
                r.final_loss,
                r.seconds
            );
        }
        s
    }
}

/// Trains every config for every seed on the knowledge base drawn with that seed and
/// evaluates it on the evaluation queries. `adaptor` supplies the shape; guidance comes from
/// each config.
pub fn ablation_run(
    spec: &SynthSpec,
    adaptor: AdaptorConfig,
    base: &TrainConfig,
    configs: &[AblationConfig],
    seeds: &[u64],
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let kb = gen_synthetic_kb(&SynthSpec {
            seed,
            ..spec.clone()
        })?;
        let data = TrainData::new(&kb.bundles, &kb.train)?;
        for c in configs {
            let start = Instant::now();
            let cfg = c.train_config(base, seed);
            let acfg = adaptor.with_guidance(c.guidance);
            let out = train(
                &data,
                &cfg,
                TrainState::<f32>::init(acfg, &cfg)?,
                TrainHooks::default(),
            )?;
            let (index, _) = embed_kb(
                &kb.bundles,
                &out.state.params,
                EmbedOptions::default(),
                None,
                None,
            )?;
            let rep = eval_retrieval(&index, &kb.eval, &DEFAULT_KS, SearchMode::Exact)?;
            rows.push(AblationRow {
                config: c.name.clone(),
                seed,
                top1_seen: rep.top1_seen.unwrap_or(0.0),
                top1_unseen: rep.top1_unseen.unwrap_or(0.0),
                top1_overall: rep.top1_overall,
                hm: rep.hm.unwrap_or(0.0),
                recall_at_5: rep.recall.get(&5).copied().unwrap_or(0.0),
                silhouette: neighborhood_silhouette(
                    &index,
                    &kb.eval,
                    SILHOUETTE_K,
                    SearchMode::Exact,
                )?,
                final_loss: out.records.last().map_or(f64::NAN, |r| r.loss),
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(AblationTable {
        spec: spec.clone(),
        train: base.clone(),
        configs: configs.to_vec(),
        rows,
    })
}
