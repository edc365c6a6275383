use super::*;
use crate::vgka::{init_params, AdaptorConfig, PatchFeatures, TokenEmbeddings};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `n_ent` entities with 1..=max_img random rows each.
fn random_index(n_ent: usize, max_img: u32, d: usize, seed: u64) -> IndexShard {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for e in 0..n_ent as u32 {
        for i in 0..rng.random_range(1..=max_img) {
            rows.push((
                e,
                i,
                (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            ));
        }
    }
    IndexShard::from_rows((0..n_ent).map(|e| format!("ent{e:05}")).collect(), rows, d).unwrap()
}

fn random_query(d: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    unit((0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

/// Straight double loop: every entity, every row, best score in f64.
fn oracle(idx: &IndexShard, q: &[f32], k: usize) -> Vec<(String, f64)> {
    let q = unit(q.to_vec());
    let mut per: Vec<(String, f64)> = Vec::new();
    for (e, id) in idx.entity_ids.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for r in 0..idx.len() {
            if idx.row_map[r].entity as usize == e {
                let s: f64 = q
                    .iter()
                    .zip(idx.rows.row(r))
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                best = best.max(s);
            }
        }
        per.push((id.clone(), best));
    }
    per.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    per.truncate(k);
    per
}

#[test]
fn entity_score_is_the_max_over_its_images() {
    // image scores 0.2 and 0.9 against the query e0
    let s = IndexShard::from_rows(
        vec!["x".into()],
        vec![
            (0, 0, vec![0.2, (1.0f32 - 0.04).sqrt()]),
            (0, 1, vec![0.9, (1.0f32 - 0.81).sqrt()]),
        ],
        2,
    )
    .unwrap();
    let r = s.query(&[1.0, 0.0], 1).unwrap();
    assert!((r.hits[0].score - 0.9).abs() < 1e-6);
    assert_eq!(r.hits[0].image_id, 1);
}

#[test]
fn stored_row_as_query_ranks_its_entity_first() {
    let idx = random_index(50, 3, 16, 1);
    for r in [0, 17, idx.len() - 1] {
        let res = idx.query(idx.rows.row(r), 3).unwrap();
        let e = idx.row_map[r].entity as usize;
        assert_eq!(res.hits[0].entity_id, idx.entity_ids[e]);
        assert!((res.hits[0].score - 1.0).abs() < 1e-6);
    }
}

#[test]
fn exact_query_matches_the_double_loop_oracle() {
    let idx = random_index(400, 5, 24, 2);
    assert!(idx.len() >= 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let q = random_query(24, &mut rng);
        let got = idx.query(&q, 10).unwrap();
        let want = oracle(&idx, &q, 10);
        assert_eq!(got.hits.len(), 10);
        for (h, (id, s)) in got.hits.iter().zip(&want) {
            assert_eq!(&h.entity_id, id);
            assert!((h.score as f64 - s).abs() < 1e-6);
        }
    }
}

#[test]
fn k_is_clamped_and_ties_break_by_entity_id() {
    let rows = vec![
        (0, 0, vec![1.0, 0.0]),
        (1, 0, vec![1.0, 0.0]),
        (2, 0, vec![0.0, 1.0]),
    ];
    let s = IndexShard::from_rows(vec!["b".into(), "a".into(), "c".into()], rows, 2).unwrap();
    let r = s.query(&[1.0, 0.0], 99).unwrap();
    let ids: Vec<&str> = r.hits.iter().map(|h| h.entity_id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    assert!(r.hits.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn error_cases() {
    let empty = IndexShard::empty(4, ImageMode::All);
    assert!(matches!(
        empty.query(&[1.0, 0.0, 0.0, 0.0], 1),
        Err(Error::Config(_))
    ));
    let mut idx = random_index(5, 1, 4, 4);
    assert!(idx.query(&[1.0, 0.0, 0.0, 0.0], 0).is_err());
    assert!(matches!(
        idx.query(&[1.0, 0.0], 1),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(idx.build_ivf(6, 1, 0), Err(Error::Config(_))));
    assert!(idx.query_ivf(&[1.0, 0.0, 0.0, 0.0], 1, 1).is_err());
}

#[test]
fn full_probing_and_single_list_equal_exact() {
    let mut idx = random_index(300, 4, 16, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let qs: Vec<Vec<f32>> = (0..20).map(|_| random_query(16, &mut rng)).collect();
    for n_lists in [1, 16] {
        idx.build_ivf(n_lists, 1, 7).unwrap();
        for q in &qs {
            assert_eq!(
                idx.query_ivf(q, 10, n_lists).unwrap().hits,
                idx.query(q, 10).unwrap().hits
            );
        }
    }
}

#[test]
fn parallel_and_sequential_scans_agree_bit_for_bit() {
    let idx = random_index(4000, 4, 32, 8);
    assert!(idx.len() > 2 * SCAN_CHUNK);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random_query(32, &mut rng);
    let a = idx.query(&q, 20).unwrap().hits;
    let b = par::with_threads(1, || idx.query(&q, 20).unwrap().hits);
    assert_eq!(a, b);
}

#[test]
fn persisted_index_reproduces_scores_exactly() {
    let mut idx = random_index(200, 3, 12, 10);
    idx.build_ivf(8, 2, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("i.wcix");
    save_index(&p, &idx).unwrap();
    let back = load_index(&p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let q = random_query(12, &mut rng);
        assert_eq!(
            back.query(&q, 5).unwrap().hits,
            idx.query(&q, 5).unwrap().hits
        );
        assert_eq!(
            back.query_ivf(&q, 5, 2).unwrap().hits,
            idx.query_ivf(&q, 5, 2).unwrap().hits
        );
    }
}

fn bundle(id: &str, rng: &mut ChaCha8Rng, n_img: usize, valid: usize) -> FeatureBundle {
    let m = |r, c, rng: &mut ChaCha8Rng| {
        Matrix::<f32>::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    };
    FeatureBundle {
        entity_id: id.into(),
        tokens: TokenEmbeddings::new(m(5, 6, rng), valid).unwrap(),
        images: (0..n_img)
            .map(|_| PatchFeatures::new(m(3, 8, rng)).unwrap())
            .collect(),
        pooled: (0..n_img).map(|_| unit(m(1, 8, rng).into_data())).collect(),
    }
}

#[test]
fn embed_kb_rows_resume_and_degenerate_entities() {
    let params = init_params::<f32>(1, AdaptorConfig::new(8, 6).with_heads(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let one = vec![bundle("solo", &mut rng, 2, 5)];
    let (s, rep) = embed_kb(&one, &params, EmbedOptions::default(), None, None).unwrap();
    assert_eq!((s.len(), rep.rows, rep.entities), (2, 2, 1));

    let mut kb: Vec<FeatureBundle> = (0..9)
        .map(|i| bundle(&format!("e{i}"), &mut rng, 2, 4))
        .collect();
    let mut dup = kb[0].clone();
    dup.entity_id = "dup".into();
    kb.push(dup);
    kb.push(bundle("empty", &mut rng, 1, 0));
    let opts = EmbedOptions {
        chunk: 3,
        ..EmbedOptions::default()
    };
    let mut calls = Vec::new();
    let mut cb = |p: &IndexShard, done: usize, total: usize| {
        calls.push((p.entity_ids.len(), done, total));
        Ok(())
    };
    let (full, rep) = embed_kb(&kb, &params, opts, None, Some(&mut cb)).unwrap();
    assert_eq!(calls.last().unwrap().1, 11);
    assert_eq!(calls.len(), 4);
    assert_eq!(rep.skipped.len(), 1);
    assert_eq!(rep.skipped[0].0, "empty");
    assert_eq!(full.rows.row(0), full.rows.row(18));
    assert!(full
        .rows
        .data()
        .chunks(8)
        .all(|r| (r.iter().map(|x| x * x).sum::<f32>() - 1.0).abs() < 1e-5));

    let serial = par::with_threads(1, || embed_kb(&kb, &params, opts, None, None).unwrap().0);
    assert_eq!(serial, full);

    // resume from a shard holding the first four entities
    let (partial, _) = embed_kb(&kb[..4], &params, opts, None, None).unwrap();
    let (resumed, rep) = embed_kb(&kb, &params, opts, Some(&partial), None).unwrap();
    assert_eq!(rep.resumed, 4);
    assert_eq!(resumed, full);

    let (primary, _) = embed_kb(
        &kb,
        &params,
        EmbedOptions {
            image_mode: ImageMode::Primary,
            chunk: 3,
        },
        None,
        None,
    )
    .unwrap();
    assert_eq!(primary.len(), 10);
}

#[test]
fn bench_stats_are_ordered_and_zero_reps_is_empty() {
    let idx = random_index(100, 2, 8, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let qs: Vec<Vec<f32>> = (0..5).map(|_| random_query(8, &mut rng)).collect();
    let none = bench_query(&idx, &qs, 0, 5, SearchMode::Exact).unwrap();
    assert_eq!((none.p50_ns, none.p95_ns, none.throughput_qps), (0, 0, 0.0));
    let s = bench_query(&idx, &qs, 3, 5, SearchMode::Exact).unwrap();
    assert!(s.p50_ns <= s.p95_ns && s.p50_ns > 0);
    assert!(s.throughput_qps > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn results_are_sorted_distinct_and_bound_single_images(seed in 0u64..1000, k in 1usize..30) {
        let idx = random_index(20, 3, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let q = random_query(6, &mut rng);
        let r = idx.query(&q, k).unwrap();
        prop_assert_eq!(r.hits.len(), k.min(20));
        prop_assert!(r.hits.windows(2).all(|w| w[0].score >= w[1].score));
        let mut ids: Vec<_> = r.hits.iter().map(|h| h.entity_id.clone()).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), r.hits.len());
        let qn = unit(q.clone());
        for h in &r.hits {
            let e = idx.entity_ids.iter().position(|x| *x == h.entity_id).unwrap() as u32;
            for row in (0..idx.len()).filter(|&i| idx.row_map[i].entity == e) {
                prop_assert!(h.score >= score_dot(&qn, idx.rows.row(row)));
            }
        }
    }
}
