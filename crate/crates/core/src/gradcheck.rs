//! Finite-difference verification of the full training objective: adaptor forward for
//! positives and synthetics, hard-negative substitution and InfoNCE, in double precision.

use crate::error::Result;
use crate::tensor::{l2_normalize, Matrix};
use crate::train::{
    batch_objective, EntityInput, ObjectiveOptions, TrainBatch, TrainData, TrainQuery,
};
use crate::vgka::{init_params, AdaptorConfig, AdaptorParams, PatchFeatures, TokenEmbeddings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub batch: usize,
    pub d_model: usize,
    pub d_text: usize,
    pub n_patches: usize,
    pub n_tokens: usize,
    pub heads: usize,
    pub layers: usize,
    pub n_sync: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so gradients that are zero up to rounding
    /// do not divide by zero.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            batch: 3,
            d_model: 8,
            d_text: 12,
            n_patches: 2,
            n_tokens: 4,
            heads: 1,
            layers: 2,
            n_sync: 2,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub parameters_checked: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub log_scale_rel_error: f64,
    pub replaced_negatives: usize,
    pub seconds: f64,
    pub passed: bool,
}

/// A random batch of `batch` entities with one query each, plus its parameters.
pub fn tiny_problem(
    cfg: &GradcheckConfig,
) -> Result<(TrainData<f64>, TrainBatch, AdaptorParams<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rand_m = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    };
    let entities = (0..cfg.batch)
        .map(|_| EntityInput {
            image: PatchFeatures::new(rand_m(cfg.n_patches, cfg.d_model, &mut rng))
                .expect("rows >= 1"),
            text: TokenEmbeddings::dense(rand_m(cfg.n_tokens, cfg.d_text, &mut rng)),
        })
        .collect();
    let queries = (0..cfg.batch)
        .map(|e| {
            let v: Vec<f64> = (0..cfg.d_model)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            Ok(TrainQuery {
                vector: l2_normalize(&v)?.0,
                entity: e,
            })
        })
        .collect::<Result<_>>()?;
    let data = TrainData {
        entity_ids: (0..cfg.batch).map(|i| format!("e{i}")).collect(),
        entities,
        queries,
    };
    let donors = crate::batch::assign_synthetics(cfg.batch, cfg.n_sync, cfg.seed)?;
    let batch = TrainBatch {
        samples: (0..cfg.batch).collect(),
        donors,
    };
    let adaptor = AdaptorConfig::new(cfg.d_model, cfg.d_text)
        .with_heads(cfg.heads)
        .with_layers(cfg.layers);
    let mut params = init_params::<f64>(cfg.seed, adaptor)?;
    // move layer-norm affine and biases off their trivial initial values
    for l in &mut params.layers {
        for t in [
            &mut l.ln1_gamma,
            &mut l.ln1_beta,
            &mut l.ln2_gamma,
            &mut l.ln2_beta,
            &mut l.ff_b1,
            &mut l.ff_b2,
        ] {
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
    Ok((data, batch, params, 1.0))
}

fn rel(fd: f64, an: f64, floor: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(floor)
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let (data, batch, params, log_scale) = tiny_problem(cfg)?;
    let opts = ObjectiveOptions::default();
    let base = batch_objective(&data, &batch, &params, log_scale, opts)?;
    let fwd = ObjectiveOptions {
        forward_only: true,
        ..opts
    };
    let loss =
        |p: &AdaptorParams<f64>, s: f64| batch_objective(&data, &batch, p, s, fwd).map(|o| o.loss);

    let names = params.tensor_names();
    let h = cfg.step;
    let (mut worst, mut worst_tensor, mut worst_index, mut checked) = (0.0f64, String::new(), 0, 0);
    let mut probe = params.clone();
    for ti in 0..names.len() {
        for e in 0..params.tensors()[ti].len() {
            let orig = params.tensors()[ti].data()[e];
            probe.tensors_mut()[ti].data_mut()[e] = orig + h;
            let up = loss(&probe, log_scale)?;
            probe.tensors_mut()[ti].data_mut()[e] = orig - h;
            let down = loss(&probe, log_scale)?;
            probe.tensors_mut()[ti].data_mut()[e] = orig;
            let r = rel(
                (up - down) / (2.0 * h),
                base.grads.tensors()[ti].data()[e],
                cfg.floor,
            );
            checked += 1;
            if r > worst {
                worst = r;
                worst_tensor = names[ti].clone();
                worst_index = e;
            }
        }
    }
    let fd_scale = (loss(&params, log_scale + h)? - loss(&params, log_scale - h)?) / (2.0 * h);
    let scale_err = rel(fd_scale, base.d_log_scale, cfg.floor);
    let max_rel = worst.max(scale_err);
    Ok(GradcheckReport {
        parameters_checked: checked + 1,
        max_rel_error: max_rel,
        worst_tensor,
        worst_index,
        log_scale_rel_error: scale_err,
        replaced_negatives: base.replaced,
        seconds: start.elapsed().as_secs_f64(),
        passed: max_rel <= cfg.tolerance,
    })
}
