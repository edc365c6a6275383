use super::*;
use crate::gradcheck::{run_gradcheck, tiny_problem, GradcheckConfig};
use crate::tensor::{dot, l2_normalize};
use crate::vgka::{adaptor_forward, PatchFeatures, TokenEmbeddings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n_ent` random entities with `per` queries each, queries loosely tied to an entity code.
fn random_data(n_ent: usize, per: usize, seed: u64) -> (TrainData<f32>, AdaptorConfig) {
    let cfg = AdaptorConfig::new(8, 6).with_heads(2).with_d_ff(16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = |r, c, rng: &mut ChaCha8Rng| {
        Matrix::<f32>::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    };
    let entities: Vec<EntityInput<f32>> = (0..n_ent)
        .map(|_| EntityInput {
            image: PatchFeatures::new(m(3, 8, &mut rng)).unwrap(),
            text: TokenEmbeddings::dense(m(4, 6, &mut rng)),
        })
        .collect();
    let codes: Vec<Vec<f32>> = (0..n_ent).map(|_| m(1, 8, &mut rng).into_data()).collect();
    let mut queries = Vec::new();
    for (e, c) in codes.iter().enumerate() {
        for _ in 0..per {
            let v: Vec<f32> = c.iter().map(|x| x + rng.random_range(-0.3..0.3)).collect();
            queries.push(TrainQuery {
                vector: l2_normalize(&v).unwrap().0,
                entity: e,
            });
        }
    }
    let data = TrainData {
        entity_ids: (0..n_ent).map(|i| format!("e{i}")).collect(),
        entities,
        queries,
    };
    (data, cfg)
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 6,
        n_sync: 3,
        lr: 5e-3,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn gradcheck_on_tiny_config_passes() {
    let r = run_gradcheck(&GradcheckConfig::default()).unwrap();
    assert!(
        r.replaced_negatives > 0,
        "synthetics never entered the objective: {r:?}"
    );
    assert!(r.passed, "{r:?}");
}

#[test]
fn zero_lr_leaves_params_bit_identical() {
    let (data, acfg) = random_data(6, 3, 1);
    let cfg = TrainConfig {
        lr: 0.0,
        ..small_cfg()
    };
    let s0 = TrainState::<f32>::init(acfg, &cfg).unwrap();
    let out = train(&data, &cfg, s0.clone(), TrainHooks::default()).unwrap();
    assert_eq!(out.state.params, s0.params);
    assert_eq!(out.state.log_scale, s0.log_scale);
    assert!(out.records.len() >= 2);
}

#[test]
fn one_step_reduces_the_same_batch_loss() {
    let (data, acfg) = random_data(8, 2, 2);
    let cfg = small_cfg();
    let state = TrainState::<f32>::init(acfg, &cfg).unwrap();
    let batch = &plan_epoch(&data, &cfg, 0).unwrap()[0];
    let opts = ObjectiveOptions::default();
    let before = batch_objective(&data, batch, &state.params, state.log_scale, opts).unwrap();
    let mut p = state.params.clone();
    let mut s = state.log_scale;
    let mut adam = AdamState::new(&p);
    adam_update(
        &mut p,
        &before.grads,
        &mut s,
        Some(before.d_log_scale),
        &mut adam,
        1e-3,
    );
    let after = batch_objective(&data, batch, &p, s, opts).unwrap();
    assert!(
        after.loss < before.loss,
        "{} -> {}",
        before.loss,
        after.loss
    );
}

#[test]
fn substitution_never_lowers_the_loss() {
    let (data, acfg) = random_data(10, 1, 3);
    let cfg = TrainConfig {
        batch_size: 10,
        n_sync: 5,
        ..small_cfg()
    };
    let st = TrainState::<f64>::init(acfg, &cfg).unwrap();
    let d64 = TrainData {
        entity_ids: data.entity_ids.clone(),
        entities: data
            .entities
            .iter()
            .map(|e| EntityInput {
                image: e.image.cast(),
                text: e.text.cast(),
            })
            .collect(),
        queries: data
            .queries
            .iter()
            .map(|q| TrainQuery {
                vector: q.vector.iter().map(|&x| x as f64).collect(),
                entity: q.entity,
            })
            .collect(),
    };
    for epoch in 0..5 {
        for batch in plan_epoch(&d64, &cfg, epoch).unwrap() {
            let with = batch_objective(
                &d64,
                &batch,
                &st.params,
                st.log_scale,
                ObjectiveOptions::default(),
            )
            .unwrap();
            let plain = TrainBatch {
                donors: vec![Vec::new(); batch.samples.len()],
                ..batch.clone()
            };
            let without = batch_objective(
                &d64,
                &plain,
                &st.params,
                st.log_scale,
                ObjectiveOptions::default(),
            )
            .unwrap();
            assert!(with.loss >= without.loss);
            if with.replaced > 0 {
                assert!(with.loss > without.loss);
            }
        }
    }
}

#[test]
fn no_synthetics_matches_plain_in_batch_infonce() {
    let (data, acfg) = random_data(5, 1, 5);
    let params = init_params::<f32>(3, acfg).unwrap();
    let batch = TrainBatch {
        samples: vec![0, 1, 2, 3, 4],
        donors: vec![Vec::new(); 5],
    };
    let log_scale = (1.0f32 / 0.07).ln();
    let got = batch_objective(
        &data,
        &batch,
        &params,
        log_scale,
        ObjectiveOptions::default(),
    )
    .unwrap();
    // reference: cross-entropy over the query-by-entity similarity matrix
    let v: Vec<Vec<f32>> = (0..5)
        .map(|e| adaptor_forward(&data.entities[e].image, &data.entities[e].text, &params).unwrap())
        .collect();
    let tau = (-log_scale).exp() as f64;
    let mut want = 0.0f64;
    for i in 0..5 {
        let z: Vec<f64> = (0..5)
            .map(|j| dot(&data.queries[i].vector, &v[j]) as f64 / tau)
            .collect();
        let lse = z.iter().map(|x| x.exp()).sum::<f64>().ln();
        want += (lse - z[i]) / 5.0;
    }
    assert!(
        (got.loss as f64 - want).abs() < 1e-5,
        "{} vs {want}",
        got.loss
    );
}

#[test]
fn loss_is_invariant_to_sample_order() {
    let (data, batch, params, s) = tiny_problem(&GradcheckConfig {
        batch: 5,
        ..GradcheckConfig::default()
    })
    .unwrap();
    let a = batch_objective(&data, &batch, &params, s, ObjectiveOptions::default()).unwrap();
    // reverse the batch, remapping donor positions
    let n = batch.samples.len();
    let rev = TrainBatch {
        samples: batch.samples.iter().rev().copied().collect(),
        donors: batch
            .donors
            .iter()
            .rev()
            .map(|d| d.iter().map(|&j| n - 1 - j).collect())
            .collect(),
    };
    let b = batch_objective(&data, &rev, &params, s, ObjectiveOptions::default()).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    assert!(a.grads.w_proj.max_abs_diff(&b.grads.w_proj) < 1e-12);
}

#[test]
fn detached_synthetics_change_only_the_gradient() {
    let (data, batch, params, s) = tiny_problem(&GradcheckConfig::default()).unwrap();
    let a = batch_objective(&data, &batch, &params, s, ObjectiveOptions::default()).unwrap();
    let opts = ObjectiveOptions {
        detach_synthetics: true,
        ..Default::default()
    };
    let b = batch_objective(&data, &batch, &params, s, opts).unwrap();
    assert_eq!(a.loss, b.loss);
    assert!(a.replaced > 0);
    assert_ne!(a.grads, b.grads);
}

#[test]
fn training_is_bit_reproducible() {
    let (data, acfg) = random_data(12, 3, 6);
    let cfg = TrainConfig {
        epochs: 2,
        ..small_cfg()
    };
    let run = || {
        let s = TrainState::<f32>::init(acfg, &cfg).unwrap();
        train(&data, &cfg, s, TrainHooks::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.state, b.state);
    assert_eq!(a.records, b.records);
    let seq = crate::par::with_threads(1, run);
    assert_eq!(seq.state, a.state);
}

#[test]
fn batches_cover_every_query_once_with_distinct_entities() {
    let (data, _) = random_data(7, 4, 7);
    let cfg = small_cfg();
    let batches = plan_epoch(&data, &cfg, 0).unwrap();
    let mut all: Vec<usize> = batches.iter().flat_map(|b| b.samples.clone()).collect();
    all.sort();
    assert_eq!(all, (0..28).collect::<Vec<_>>());
    for b in &batches {
        let mut e: Vec<usize> = b.samples.iter().map(|&s| data.queries[s].entity).collect();
        e.sort();
        e.dedup();
        assert_eq!(e.len(), b.samples.len());
        assert!(b
            .donors
            .iter()
            .all(|d| d.len() == cfg.n_sync.min(b.samples.len() - 1)));
    }
}

#[test]
fn early_stopping_keeps_the_best_state() {
    let (data, acfg) = random_data(12, 3, 8);
    let cfg = TrainConfig {
        epochs: 4,
        eval_every: 1,
        patience: 2,
        ..small_cfg()
    };
    let s = TrainState::<f32>::init(acfg, &cfg).unwrap();
    // a metric that peaks at the second evaluation
    let mut calls = 0;
    let mut eval = |_: &AdaptorParams<f32>| -> Result<f64> {
        calls += 1;
        Ok(if calls == 2 { 1.0 } else { 0.0 })
    };
    let out = train(
        &data,
        &cfg,
        s,
        TrainHooks {
            on_step: None,
            evaluate: Some(&mut eval),
        },
    )
    .unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.records.len(), 4);
    assert_eq!(out.state.step, 2);
    assert_eq!(out.best_eval, Some(1.0));
}

#[test]
fn non_finite_params_abort_with_dump() {
    let (data, acfg) = random_data(6, 2, 9);
    let cfg = small_cfg();
    let mut s = TrainState::<f32>::init(acfg, &cfg).unwrap();
    s.params.layers[0].ff_b2.data_mut()[0] = f32::NAN;
    match train(&data, &cfg, s, TrainHooks::default()) {
        Err(Error::Diverged { dump, .. }) | Err(Error::Degenerate(dump)) => {
            assert!(!dump.is_empty())
        }
        other => panic!("{:?}", other.map(|o| o.records.len())),
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig {
        batch_size: 1,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        n_sync: 128,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        init_tau: 0.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!(tau_from_log_scale(10.0f64), (MIN_TAU, true));
}
