//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdicts always reach the terminal. Criteria 6
//! (a soft, reported ablation direction) and 9 (a throughput target that depends on the
//! host's core count) are reported but do not fail the run; every other criterion does.
//! `ACCEPTANCE_ONLY=5,7` restricts the run to the listed criteria.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;
use ver_core::batch::{select_hard_negatives, NegSlot};
use ver_core::eval::{
    ablation_run, eval_retrieval, gen_synthetic_kb, harmonic_mean, AblationConfig, SynthSpec,
};
use ver_core::gradcheck::{run_gradcheck, GradcheckConfig};
use ver_core::kb::{validate_store, write_store, Store, STORE_FILE};
use ver_core::par;
use ver_core::retrieval::{
    bench_query, embed_kb, load_index, save_index, validate_index, EmbedOptions, IndexShard,
    SearchMode,
};
use ver_core::train::{
    infonce_loss, save_checkpoint, train, TrainConfig, TrainData, TrainHooks, TrainState,
};
use ver_core::vgka::{AdaptorConfig, Guidance};

// pinned tolerances and thresholds
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_MAX_SECONDS: f64 = 60.0;
const LOSS_ORACLE_TOL: f64 = 1e-9;
const LOSS_INSTANCES: usize = 100;
const HN_INSTANCES: usize = 1000;
const HM_TOL: f64 = 0.05;
const SEEN_MIN: f64 = 0.85;
const UNSEEN_MIN: f64 = 0.50;
const UNTRAINED_MAX: f64 = 0.05;
const RECOVERY_MAX_SECONDS: f64 = 600.0;
const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ABLATION_WINS: usize = 4;
const SCORE_TOL: f64 = 1e-6;
const IVF_RECALL_MIN: f64 = 0.95;
const FLIPS: usize = 100;
const LATENCY_ROWS: usize = 100_000;
const LATENCY_DIM: usize = 256;
const P50_MAX_NS: u64 = 100_000_000;
const SCALING_MIN: f64 = 3.0;
const SCALING_THREADS: usize = 8;

struct Verdict {
    pass: bool,
    gating: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        gating: true,
        detail: detail.into(),
    }
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = gauss(rng, n);
    let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gradients() -> Verdict {
    let cfg = GradcheckConfig::default();
    let shape = (
        cfg.batch,
        cfg.d_model,
        cfg.d_text,
        cfg.n_patches,
        cfg.n_tokens,
        cfg.heads,
        cfg.layers,
    );
    if shape != (3, 8, 12, 2, 4, 1, 2) {
        return verdict(false, format!("default gradcheck shape drifted: {shape:?}"));
    }
    match run_gradcheck(&cfg) {
        Ok(r) => verdict(
            r.max_rel_error <= GRAD_REL_TOL
                && r.log_scale_rel_error <= GRAD_REL_TOL
                && r.seconds < GRAD_MAX_SECONDS,
            format!(
                "{} scalars, max rel error {:.2e} ({}[{}]), temperature {:.2e}, {:.2}s",
                r.parameters_checked,
                r.max_rel_error,
                r.worst_tensor,
                r.worst_index,
                r.log_scale_rel_error,
                r.seconds
            ),
        ),
        Err(e) => verdict(false, e.to_string()),
    }
}

/// Softmax cross-entropy over `[positive, negatives...]` logits, written out directly.
fn cross_entropy_oracle(q: &[Vec<f64>], pos: &[Vec<f64>], neg: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..q.len() {
        let logits: Vec<f64> = std::iter::once(&pos[i])
            .chain(&neg[i])
            .map(|v| dot(&q[i], v) / tau)
            .collect();
        let denom: f64 = logits.iter().map(|z| z.exp()).sum();
        total += -(logits[0].exp() / denom).ln();
    }
    total / q.len() as f64
}

fn loss_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..LOSS_INSTANCES {
        let b = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let tau = rng.random_range(0.05..1.0);
        let q: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, d)).collect();
        let pos: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, d)).collect();
        let neg: Vec<Vec<Vec<f64>>> = (0..b)
            .map(|_| {
                let n = rng.random_range(0..=10);
                (0..n).map(|_| unit(&mut rng, d)).collect()
            })
            .collect();
        let qr: Vec<&[f64]> = q.iter().map(Vec::as_slice).collect();
        let pr: Vec<&[f64]> = pos.iter().map(Vec::as_slice).collect();
        let nr: Vec<Vec<&[f64]>> = neg
            .iter()
            .map(|n| n.iter().map(Vec::as_slice).collect())
            .collect();
        let got = match infonce_loss(&qr, &pr, &nr, tau) {
            Ok(l) => l.loss,
            Err(e) => return verdict(false, e.to_string()),
        };
        worst = worst.max((got - cross_entropy_oracle(&q, &pos, &neg, tau)).abs());
    }
    // every logit equal: B−1 negatives identical to the positive
    let mut uniform_err = 0.0f64;
    for b in [2usize, 3, 8, 32] {
        let v = unit(&mut rng, 6);
        let q: Vec<&[f64]> = vec![&v[..]; b];
        let negs: Vec<Vec<&[f64]>> = vec![vec![&v[..]; b - 1]; b];
        let l = infonce_loss(&q, &q, &negs, 0.07)
            .map(|l| l.loss)
            .unwrap_or(f64::NAN);
        uniform_err = uniform_err.max((l - (b as f64).ln()).abs());
    }
    verdict(
        worst <= LOSS_ORACLE_TOL && uniform_err <= LOSS_ORACLE_TOL,
        format!("max |loss − oracle| {worst:.1e} over {LOSS_INSTANCES} instances, uniform logits |loss − ln B| {uniform_err:.1e}"),
    )
}

/// Best final negative set over every way of placing each synthetic into a distinct original
/// slot (or nowhere) where it is strictly more similar. Maximizes the summed similarity.
fn exhaustive_best(orig: &[f64], syn: &[f64]) -> (f64, usize) {
    fn go(
        k: usize,
        orig: &[f64],
        syn: &[f64],
        used: &mut Vec<bool>,
        gain: f64,
        count: usize,
        best: &mut (f64, usize),
    ) {
        if k == syn.len() {
            if gain > best.0 {
                *best = (gain, count);
            }
            return;
        }
        go(k + 1, orig, syn, used, gain, count, best);
        for s in 0..orig.len() {
            if !used[s] && syn[k] > orig[s] {
                used[s] = true;
                go(
                    k + 1,
                    orig,
                    syn,
                    used,
                    gain + syn[k] - orig[s],
                    count + 1,
                    best,
                );
                used[s] = false;
            }
        }
    }
    let mut best = (0.0, 0);
    go(
        0,
        orig,
        syn,
        &mut vec![false; orig.len()],
        0.0,
        0,
        &mut best,
    );
    (orig.iter().sum::<f64>() + best.0, best.1)
}

fn hard_negatives() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut oracle_checked, mut replaced_total) = (0usize, 0usize);
    for inst in 0..HN_INSTANCES {
        let b = rng.random_range(2..=10);
        let n_sync = rng.random_range(0..=(b - 1).min(8));
        let d = rng.random_range(2..=12);
        let q = unit(&mut rng, d);
        let pos = unit(&mut rng, d);
        let orig: Vec<Vec<f64>> = (0..b - 1).map(|_| unit(&mut rng, d)).collect();
        let syn: Vec<Vec<f64>> = (0..n_sync).map(|_| unit(&mut rng, d)).collect();
        let or: Vec<&[f64]> = orig.iter().map(Vec::as_slice).collect();
        let sr: Vec<&[f64]> = syn.iter().map(Vec::as_slice).collect();
        let sel = select_hard_negatives(&q, &or, &sr);
        if sel.slots.len() != orig.len() {
            return verdict(
                false,
                format!(
                    "instance {inst}: {} slots for {} negatives",
                    sel.slots.len(),
                    orig.len()
                ),
            );
        }
        for r in &sel.replacements {
            if dot(&q, &syn[r.synthetic]) <= dot(&q, &orig[r.slot]) {
                return verdict(
                    false,
                    format!(
                        "instance {inst}: replacement of slot {} does not raise similarity",
                        r.slot
                    ),
                );
            }
        }
        replaced_total += sel.replacements.len();
        let chosen: Vec<&[f64]> = sel
            .slots
            .iter()
            .map(|s| match *s {
                NegSlot::Original(i) => &orig[i][..],
                NegSlot::Synthetic(j) => &syn[j][..],
            })
            .collect();
        let tau = 0.1;
        let with = infonce_loss(&[&q[..]], &[&pos[..]], std::slice::from_ref(&chosen), tau)
            .map(|l| l.loss)
            .unwrap_or(f64::NAN);
        let without = infonce_loss(&[&q[..]], &[&pos[..]], std::slice::from_ref(&or), tau)
            .map(|l| l.loss)
            .unwrap_or(f64::NAN);
        if !(with >= without) {
            return verdict(
                false,
                format!("instance {inst}: loss with substitution {with} < without {without}"),
            );
        }
        if b <= 6 && n_sync <= 3 {
            let os: Vec<f64> = orig.iter().map(|v| dot(&q, v)).collect();
            let ss: Vec<f64> = syn.iter().map(|v| dot(&q, v)).collect();
            let (best_sum, best_count) = exhaustive_best(&os, &ss);
            let greedy_sum: f64 = chosen.iter().map(|v| dot(&q, v)).sum();
            if (greedy_sum - best_sum).abs() > 1e-12 || sel.replacements.len() != best_count {
                return verdict(
                    false,
                    format!("instance {inst}: greedy sum {greedy_sum} / {} swaps, oracle {best_sum} / {best_count}", sel.replacements.len()),
                );
            }
            oracle_checked += 1;
        }
    }
    verdict(
        true,
        format!("{HN_INSTANCES} instances, {replaced_total} replacements, {oracle_checked} matched the exhaustive oracle"),
    )
}

fn metric_anchors() -> Verdict {
    let a = harmonic_mean(36.8, 27.0).unwrap_or(f64::NAN);
    let b = harmonic_mean(61.5, 21.7).unwrap_or(f64::NAN);
    verdict(
        (a - 31.1).abs() <= HM_TOL && (b - 32.1).abs() <= HM_TOL,
        format!("hm(36.8, 27.0) = {a:.3}, hm(61.5, 21.7) = {b:.3}"),
    )
}

/// The desk configuration used for planted recovery.
fn recovery_setup(seed: u64) -> (AdaptorConfig, TrainConfig) {
    (
        AdaptorConfig::new(64, 96).with_heads(4),
        TrainConfig {
            batch_size: 32,
            n_sync: 8,
            lr: 3e-3,
            epochs: 1,
            seed,
            ..TrainConfig::default()
        },
    )
}

fn planted_recovery() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in [7u64, 11, 13] {
        let spec = SynthSpec {
            seed,
            ..SynthSpec::default()
        };
        let run = || -> ver_core::Result<(f64, f64, f64, f64)> {
            let kb = gen_synthetic_kb(&spec)?;
            let (acfg, cfg) = recovery_setup(seed);
            let data = TrainData::new(&kb.bundles, &kb.train)?;
            let state = TrainState::<f32>::init(acfg, &cfg)?;
            let (i0, _) = embed_kb(
                &kb.bundles,
                &state.params,
                EmbedOptions::default(),
                None,
                None,
            )?;
            let r0 = eval_retrieval(&i0, &kb.eval, &[1], SearchMode::Exact)?;
            let t = Instant::now();
            let out = train(&data, &cfg, state, TrainHooks::default())?;
            let secs = t.elapsed().as_secs_f64();
            let (i1, _) = embed_kb(
                &kb.bundles,
                &out.state.params,
                EmbedOptions::default(),
                None,
                None,
            )?;
            let r1 = eval_retrieval(&i1, &kb.eval, &[1], SearchMode::Exact)?;
            let g = |x: Option<f64>| x.unwrap_or(0.0);
            Ok((
                g(r1.top1_seen),
                g(r1.top1_unseen),
                g(r0.top1_seen).max(g(r0.top1_unseen)),
                secs,
            ))
        };
        match run() {
            Ok((seen, unseen, untrained, secs)) => {
                pass &= seen >= SEEN_MIN
                    && unseen >= UNSEEN_MIN
                    && untrained <= UNTRAINED_MAX
                    && secs <= RECOVERY_MAX_SECONDS;
                parts.push(format!("seed {seed}: seen {seen:.3} unseen {unseen:.3} untrained {untrained:.3} in {secs:.0}s"));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("seed {seed}: {e}"));
            }
        }
    }
    verdict(pass, parts.join("; "))
}

fn ablation_direction() -> Verdict {
    let spec = SynthSpec::confusable_pairs(0);
    let base = TrainConfig {
        batch_size: 32,
        n_sync: 8,
        lr: 3e-3,
        epochs: 3,
        ..TrainConfig::default()
    };
    let configs = [
        AblationConfig::new("vanilla", Guidance::Both, false, false),
        AblationConfig::new("full", Guidance::Both, true, true),
    ];
    let table = match ablation_run(
        &spec,
        AdaptorConfig::new(64, 96).with_heads(4),
        &base,
        &configs,
        &ABLATION_SEEDS,
    ) {
        Ok(t) => t,
        Err(e) => {
            return Verdict {
                pass: false,
                gating: false,
                detail: e.to_string(),
            }
        }
    };
    for line in table.render().lines() {
        println!("    {line}");
    }
    let c = table.compare("full", "vanilla");
    Verdict {
        pass: c.top1_wins >= ABLATION_WINS && c.silhouette_wins >= ABLATION_WINS,
        gating: false,
        detail: format!(
            "full beats vanilla on top-1 in {}/{} seeds and on neighborhood silhouette in {}/{} (need {ABLATION_WINS})",
            c.top1_wins, c.seeds, c.silhouette_wins, c.seeds
        ),
    }
}

fn random_rows(
    rng: &mut ChaCha8Rng,
    entities: usize,
    per: usize,
    d: usize,
) -> Vec<(u32, u32, Vec<f32>)> {
    (0..entities * per)
        .map(|r| {
            (
                (r / per) as u32,
                (r % per) as u32,
                gauss(rng, d).iter().map(|&x| x as f32).collect(),
            )
        })
        .collect()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("E{i:06}")).collect()
}

/// Per-entity best score and image, by a plain double loop in f64 over the stored rows.
fn brute_force(index: &IndexShard, q: &[f32]) -> Vec<(f64, usize, u32)> {
    let n = q.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let mut best: Vec<Option<(f64, u32)>> = vec![None; index.entity_ids.len()];
    for r in 0..index.len() {
        let mut s = 0.0;
        for (a, b) in q.iter().zip(index.rows.row(r)) {
            s += (*a as f64 / n) * *b as f64;
        }
        let rr = index.row_map[r];
        let slot = &mut best[rr.entity as usize];
        if slot.is_none_or(|(bs, _)| s > bs) {
            *slot = Some((s, rr.image));
        }
    }
    let mut out: Vec<(f64, usize, u32)> = best
        .into_iter()
        .enumerate()
        .filter_map(|(e, b)| b.map(|(s, i)| (s, e, i)))
        .collect();
    out.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(index.entity_ids[a.1].cmp(&index.entity_ids[b.1]))
    });
    out
}

fn retrieval_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 128;
    let index = match IndexShard::from_rows(ids(5000), random_rows(&mut rng, 5000, 2, d), d) {
        Ok(i) => i,
        Err(e) => return verdict(false, e.to_string()),
    };
    let k = 10;
    let slot: HashMap<&str, usize> = index
        .entity_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut worst = 0.0f64;
    for qi in 0..200 {
        let q: Vec<f32> = gauss(&mut rng, d).iter().map(|&x| x as f32).collect();
        let oracle = brute_force(&index, &q);
        let got = match index.query(&q, k) {
            Ok(r) => r.hits,
            Err(e) => return verdict(false, e.to_string()),
        };
        let kth = oracle[k - 1].0;
        for (pos, h) in got.iter().enumerate() {
            let e = slot[h.entity_id.as_str()];
            let o = oracle.iter().find(|x| x.1 == e).expect("entity in oracle");
            worst = worst
                .max((h.score as f64 - oracle[pos].0).abs())
                .max((h.score as f64 - o.0).abs());
            // a different member of the top-k is only acceptable on a tie within tolerance
            if o.0 < kth - SCORE_TOL
                || (h.image_id != o.2 && (h.score as f64 - o.0).abs() > SCORE_TOL)
            {
                return verdict(
                    false,
                    format!(
                        "query {qi}: {} at rank {} disagrees with the brute-force scan",
                        h.entity_id,
                        pos + 1
                    ),
                );
            }
        }
        if got.len() != k || worst > SCORE_TOL {
            return verdict(
                false,
                format!("query {qi}: {} hits, score error {worst:.2e}", got.len()),
            );
        }
    }

    // per-entity max over images, every entity ranked
    let mut per_entity_worst = 0.0f64;
    for _ in 0..10 {
        let q: Vec<f32> = gauss(&mut rng, d).iter().map(|&x| x as f32).collect();
        let n = q.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let all = index
            .query(&q, index.entity_ids.len())
            .map(|r| r.hits)
            .unwrap_or_default();
        if all.len() != index.entity_ids.len() {
            return verdict(false, "k = #entities did not return every entity");
        }
        for h in &all {
            let e = slot[h.entity_id.as_str()];
            let scan = (0..2)
                .map(|i| {
                    let r = 2 * e + i;
                    q.iter()
                        .zip(index.rows.row(r))
                        .map(|(a, b)| *a as f64 / n * *b as f64)
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            per_entity_worst = per_entity_worst.max((h.score as f64 - scan).abs());
        }
    }

    // inverted lists on clustered rows
    let centres: Vec<Vec<f64>> = (0..100).map(|_| unit(&mut rng, d)).collect();
    let rows: Vec<(u32, u32, Vec<f32>)> = (0..10_000)
        .map(|r| {
            let c = &centres[r % 100];
            let noise = gauss(&mut rng, d);
            (
                (r / 2) as u32,
                (r % 2) as u32,
                c.iter()
                    .zip(&noise)
                    .map(|(a, b)| (a + 0.05 * b) as f32)
                    .collect(),
            )
        })
        .collect();
    let mut clustered = match IndexShard::from_rows(ids(5000), rows, d) {
        Ok(i) => i,
        Err(e) => return verdict(false, e.to_string()),
    };
    let n_lists = 64;
    if let Err(e) = clustered.build_ivf(n_lists, n_lists / 8, 11) {
        return verdict(false, e.to_string());
    }
    let (mut full_equal, mut hits1) = (true, 0usize);
    let nq = 200;
    for _ in 0..nq {
        let c = &centres[rng.random_range(0..100)];
        let noise = gauss(&mut rng, d);
        let q: Vec<f32> = c
            .iter()
            .zip(&noise)
            .map(|(a, b)| (a + 0.05 * b) as f32)
            .collect();
        let exact = clustered.query(&q, k).map(|r| r.hits).unwrap_or_default();
        let full = clustered
            .search(&q, k, SearchMode::Ivf { n_probe: n_lists })
            .map(|r| r.hits)
            .unwrap_or_default();
        full_equal &= exact == full;
        let probe = clustered
            .search(
                &q,
                1,
                SearchMode::Ivf {
                    n_probe: n_lists / 8,
                },
            )
            .map(|r| r.hits)
            .unwrap_or_default();
        hits1 +=
            (probe.first().map(|h| &h.entity_id) == exact.first().map(|h| &h.entity_id)) as usize;
    }
    let recall = hits1 as f64 / nq as f64;
    verdict(
        per_entity_worst <= SCORE_TOL && full_equal && recall >= IVF_RECALL_MIN,
        format!(
            "200 queries over 10k rows match brute force (score error {worst:.1e}), per-entity max error {per_entity_worst:.1e}, \
             full probing identical: {full_equal}, recall@1 at n_probe = {} is {recall:.3}",
            n_lists / 8
        ),
    )
}

/// Flips `FLIPS` random single bytes of `file`, one at a time, and counts the flips the
/// validator reports with an offset inside the file.
fn fuzz(
    file: &Path,
    validate: impl Fn() -> ver_core::Result<ver_core::kb::ValidationReport>,
    seed: u64,
) -> (usize, String) {
    let original = std::fs::read(file).expect("file exists");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut caught = 0;
    let mut first_miss = String::new();
    let mut positions: Vec<usize> = (0..original.len()).collect();
    positions.shuffle(&mut rng);
    for &pos in positions.iter().take(FLIPS) {
        let mut data = original.clone();
        data[pos] ^= rng.random_range(1..=255u8);
        std::fs::write(file, &data).expect("writable");
        match validate() {
            Ok(r)
                if !r.findings.is_empty()
                    && r.findings.iter().all(|f| f.offset <= data.len() as u64) =>
            {
                caught += 1
            }
            other => {
                if first_miss.is_empty() {
                    first_miss = format!("byte {pos}: {:?}", other.map(|r| r.findings));
                }
            }
        }
    }
    std::fs::write(file, &original).expect("writable");
    (caught, first_miss)
}

fn persistence() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = SynthSpec {
        n_entities: 24,
        n_seen: 12,
        train_queries: 2,
        seed: 5,
        ..SynthSpec::default()
    };
    let run = || -> ver_core::Result<Verdict> {
        let kb = gen_synthetic_kb(&spec)?;
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_store(&a, kb.dims, &kb.bundles)?;
        let back = Store::open(&a)?.read_all()?;
        write_store(&b, kb.dims, &back)?;
        let store_same = back == kb.bundles
            && std::fs::read(a.join(STORE_FILE))? == std::fs::read(b.join(STORE_FILE))?;

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut shard = IndexShard::from_rows(ids(300), random_rows(&mut rng, 300, 2, 32), 32)?;
        shard.build_ivf(16, 2, 1)?;
        let ia = dir.path().join("a.wcix");
        let ib = dir.path().join("b.wcix");
        save_index(&ia, &shard)?;
        let loaded = load_index(&ia)?;
        save_index(&ib, &loaded)?;
        let index_same = loaded == shard && std::fs::read(&ia)? == std::fs::read(&ib)?;

        let store_file = a.join(STORE_FILE);
        let (store_caught, store_miss) = fuzz(&store_file, || validate_store(&a), 21);
        let (index_caught, index_miss) = fuzz(&ia, || validate_index(&ia), 22);
        let pass = store_same && index_same && store_caught == FLIPS && index_caught == FLIPS;
        let mut detail = format!(
            "round trips bit-identical: store {store_same}, index {index_same}; located rejections: store {store_caught}/{FLIPS}, index {index_caught}/{FLIPS}"
        );
        for m in [store_miss, index_miss].iter().filter(|m| !m.is_empty()) {
            detail.push_str(&format!("; first miss {m}"));
        }
        Ok(verdict(pass, detail))
    };
    run().unwrap_or_else(|e| verdict(false, e.to_string()))
}

fn latency() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = LATENCY_DIM;
    let index = match IndexShard::from_rows(
        ids(LATENCY_ROWS / 2),
        random_rows(&mut rng, LATENCY_ROWS / 2, 2, d),
        d,
    ) {
        Ok(i) => i,
        Err(e) => return verdict(false, e.to_string()),
    };
    let queries: Vec<Vec<f32>> = (0..64)
        .map(|_| gauss(&mut rng, d).iter().map(|&x| x as f32).collect())
        .collect();
    let one = par::with_threads(1, || {
        bench_query(&index, &queries, 3, 10, SearchMode::Exact)
    });
    let many = par::with_threads(SCALING_THREADS, || {
        bench_query(&index, &queries, 3, 10, SearchMode::Exact)
    });
    let (one, many) = match (one, many) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return verdict(false, e.to_string()),
    };
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let speedup = many.throughput_qps / one.throughput_qps;
    Verdict {
        pass: many.p50_ns <= P50_MAX_NS && speedup >= SCALING_MIN,
        gating: false,
        detail: format!(
            "{} rows D={d}: p50 {:.2} ms (1 thread {:.2} ms), throughput {:.1} q/s at {SCALING_THREADS} threads vs {:.1} at 1, \
             speedup x{speedup:.2} on a host with {cores} core(s)",
            index.len(),
            many.p50_ns as f64 / 1e6,
            one.p50_ns as f64 / 1e6,
            many.throughput_qps,
            one.throughput_qps
        ),
    }
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = SynthSpec {
        n_entities: 48,
        n_seen: 24,
        train_queries: 4,
        seed: 3,
        ..SynthSpec::default()
    };
    let run = || -> ver_core::Result<Verdict> {
        let kb = gen_synthetic_kb(&spec)?;
        let data = TrainData::<f32>::new(&kb.bundles, &kb.train)?;
        let (acfg, mut cfg) = recovery_setup(17);
        cfg.batch_size = 16;
        let train_once = |path: &Path| -> ver_core::Result<()> {
            let out = par::with_threads(4, || {
                train(
                    &data,
                    &cfg,
                    TrainState::init(acfg, &cfg)?,
                    TrainHooks::default(),
                )
            })?;
            save_checkpoint(
                path,
                &out.state.to_checkpoint(cfg.seed),
                serde_json::Value::Null,
            )
        };
        let (ca, cb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        train_once(&ca)?;
        train_once(&cb)?;
        let ckpt_same = std::fs::read(&ca)? == std::fs::read(&cb)?;

        let params = ver_core::train::load_checkpoint::<f32>(&ca)?.params;
        let embed = |t: usize, path: &Path| -> ver_core::Result<()> {
            let (s, _) = par::with_threads(t, || {
                embed_kb(&kb.bundles, &params, EmbedOptions::default(), None, None)
            })?;
            save_index(path, &s)
        };
        let (sa, sb) = (dir.path().join("par.wcix"), dir.path().join("ser.wcix"));
        embed(4, &sa)?;
        embed(1, &sb)?;
        let shard_same = std::fs::read(&sa)? == std::fs::read(&sb)?;
        Ok(verdict(
            ckpt_same && shard_same,
            format!("repeat training bit-identical: {ckpt_same}; 4-thread and 1-thread shards bit-identical: {shard_same}"),
        ))
    };
    run().unwrap_or_else(|e| verdict(false, e.to_string()))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Verdict); 10] = [
        (1, "gradient suite", gradients),
        (2, "loss oracle", loss_oracle),
        (3, "hard-negative invariants", hard_negatives),
        (4, "metric anchors", metric_anchors),
        (5, "planted recovery", planted_recovery),
        (6, "ablation direction (reported)", ablation_direction),
        (7, "retrieval exactness", retrieval_exactness),
        (8, "persistence", persistence),
        (9, "latency and scaling (reported)", latency),
        (10, "determinism", determinism),
    ];
    let mut lines = Vec::new();
    let mut failed_gate = false;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let v = f();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let line = format!(
            "criterion {id:>2} {tag} {name}: {} [{:.1}s]",
            v.detail,
            t.elapsed().as_secs_f64()
        );
        println!("{line}");
        failed_gate |= v.gating && !v.pass;
        lines.push(line);
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("  {l}");
    }
    if failed_gate {
        std::process::exit(1);
    }
}
