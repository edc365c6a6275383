//! Contrastive training of the adaptor.
//!
//! Each epoch re-clusters the training queries, packs visually similar batches, assigns
//! synthetic-negative donors and runs Adam on the InfoNCE objective under a cosine learning
//! rate schedule. The logit scale `ln(1/τ)` is learned alongside the weights.

mod checkpoint;
mod loss;
mod objective;
mod optim;

pub use checkpoint::{
    decode_checkpoint, load_checkpoint, manifest_path, save_checkpoint, Checkpoint,
    CheckpointManifest, TensorInfo, CKPT_MAGIC, CKPT_VERSION,
};
pub use loss::{infonce_loss, InfoNce};
pub use objective::{
    batch_objective, batch_query_similarity, tau_from_log_scale, BatchObjective, EntityInput,
    ObjectiveOptions, TrainBatch, TrainData, TrainQuery, MIN_TAU,
};
pub use optim::{adam_update, cosine_lr, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::batch::{assign_synthetics, build_batches, cluster_count, kmeans_cluster, ClusterPlan};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};
use crate::vgka::{init_params, AdaptorConfig, AdaptorParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Synthetic negatives per sample; 0 gives plain in-batch InfoNCE.
    pub n_sync: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Pack batches from k-means clusters of the queries instead of a uniform shuffle.
    pub clustered: bool,
    /// Keep samples of one entity out of the same batch.
    pub distinct_entities: bool,
    pub detach_synthetics: bool,
    pub learn_temperature: bool,
    /// Starting temperature.
    pub init_tau: f64,
    /// Evaluate every this many steps for early stopping; 0 disables.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            n_sync: 8,
            lr: 1e-4,
            epochs: 1,
            seed: 0,
            clustered: true,
            distinct_entities: true,
            detach_synthetics: false,
            learn_temperature: true,
            init_tau: 0.07,
            eval_every: 0,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.n_sync > self.batch_size - 1 {
            return Err(Error::Config(format!(
                "n_sync {} must be <= batch_size - 1 = {}",
                self.n_sync,
                self.batch_size - 1
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(self.init_tau >= MIN_TAU) || !self.init_tau.is_finite() {
            return Err(Error::Config(format!(
                "init_tau must be >= {MIN_TAU}, got {}",
                self.init_tau
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer over `(base, stream, index)`; gives independent seeds per purpose.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_CLUSTER: u64 = 2;
const STREAM_PACK: u64 = 3;
const STREAM_DONORS: u64 = 4;

/// Batches of one epoch with their synthetic donors.
pub fn plan_epoch<T: Real>(
    data: &TrainData<T>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<TrainBatch>> {
    cfg.validate()?;
    let n = data.queries.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "need at least 2 training queries, got {n}"
        )));
    }
    let d = data.queries[0].vector.len();
    let plan = if cfg.clustered {
        let m = Matrix::<f32>::from_fn(n, d, |i, j| data.queries[i].vector[j].as_f64() as f32);
        kmeans_cluster(
            &m,
            cluster_count(n, cfg.batch_size),
            derive_seed(cfg.seed, STREAM_CLUSTER, epoch as u64),
        )?
    } else {
        ClusterPlan {
            assignments: vec![0; n],
            centroids: Matrix::zeros(1, d),
            inertia: 0.0,
            iterations: 0,
        }
    };
    let ent: Vec<usize> = data.queries.iter().map(|q| q.entity).collect();
    let packs = build_batches(
        &plan,
        cfg.batch_size,
        derive_seed(cfg.seed, STREAM_PACK, epoch as u64),
        cfg.distinct_entities.then_some(&ent[..]),
    )?;
    packs
        .into_iter()
        .enumerate()
        .filter(|(_, s)| s.len() >= 2)
        .map(|(b, samples)| {
            // a short batch cannot supply more donors than it has other members
            let k = cfg.n_sync.min(samples.len() - 1);
            let seed = derive_seed(cfg.seed, STREAM_DONORS, ((epoch as u64) << 32) | b as u64);
            Ok(TrainBatch {
                donors: assign_synthetics(samples.len(), k, seed)?,
                samples,
            })
        })
        .collect()
}

/// Parameters, temperature and optimizer state that evolve during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: AdaptorParams<T>,
    pub log_scale: T,
    pub adam: AdamState<T>,
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    pub fn init(adaptor: AdaptorConfig, cfg: &TrainConfig) -> Result<Self> {
        let params = init_params::<T>(derive_seed(cfg.seed, STREAM_INIT, 0), adaptor)?;
        Ok(Self::from_params(params, T::lit((1.0 / cfg.init_tau).ln())))
    }

    pub fn from_params(params: AdaptorParams<T>, log_scale: T) -> Self {
        let adam = AdamState::new(&params);
        Self {
            params,
            log_scale,
            adam,
            step: 0,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Self {
        let adam = ck.optimizer.unwrap_or_else(|| AdamState::new(&ck.params));
        Self {
            params: ck.params,
            log_scale: ck.log_scale,
            adam,
            step: ck.step,
        }
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint<T> {
        Checkpoint {
            params: self.params.clone(),
            log_scale: self.log_scale,
            optimizer: Some(self.adam.clone()),
            seed,
            step: self.step,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    /// Fraction of in-batch negative slots replaced by synthetics.
    pub replacement_rate: f64,
    pub intra_batch_sim: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub records: Vec<StepRecord>,
    pub best_eval: Option<f64>,
    pub stopped_early: bool,
}

/// Optional callbacks for [`train`].
#[derive(Default)]
pub struct TrainHooks<'a, T> {
    /// Receives every step record as it is produced.
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord) -> Result<()>>,
    /// Held-out metric (higher is better) used for early stopping.
    pub evaluate: Option<&'a mut dyn FnMut(&AdaptorParams<T>) -> Result<f64>>,
}

/// Runs `cfg.epochs` epochs from `state`.
///
/// With an evaluator and `eval_every > 0`, the metric is computed every `eval_every` steps and
/// at the end; training stops after `patience` evaluations without improvement and the best
/// parameters are returned.
pub fn train<T: Real>(
    data: &TrainData<T>,
    cfg: &TrainConfig,
    mut state: TrainState<T>,
    hooks: TrainHooks<'_, T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let TrainHooks {
        mut on_step,
        mut evaluate,
    } = hooks;
    let epochs: Vec<Vec<TrainBatch>> = (0..cfg.epochs)
        .map(|e| plan_epoch(data, cfg, e))
        .collect::<Result<_>>()?;
    let total: usize = epochs.iter().map(Vec::len).sum();
    let opts = ObjectiveOptions {
        detach_synthetics: cfg.detach_synthetics,
        forward_only: false,
    };
    let mut records = Vec::with_capacity(total);
    let (mut best, mut best_state, mut stale, mut stopped_early) =
        (None::<f64>, None, 0usize, false);
    let mut k = 0usize;
    'outer: for (epoch, batches) in epochs.iter().enumerate() {
        for batch in batches {
            let lr = cosine_lr(k, total, cfg.lr);
            let obj = batch_objective(data, batch, &state.params, state.log_scale, opts)?;
            if !obj.loss.is_finite() || !obj.grads.all_finite() {
                return Err(divergence(data, batch, &state, &obj, state.step));
            }
            let scale_grad = cfg.learn_temperature.then_some(obj.d_log_scale);
            adam_update(
                &mut state.params,
                &obj.grads,
                &mut state.log_scale,
                scale_grad,
                &mut state.adam,
                lr,
            );
            // keep τ at or above its floor
            let max_scale = T::lit((1.0 / MIN_TAU).ln());
            if state.log_scale > max_scale {
                state.log_scale = max_scale;
            }
            state.step += 1;
            k += 1;
            let mut rec = StepRecord {
                step: state.step,
                epoch,
                loss: obj.loss.as_f64(),
                lr,
                tau: obj.tau.as_f64(),
                replacement_rate: if obj.negative_slots == 0 {
                    0.0
                } else {
                    obj.replaced as f64 / obj.negative_slots as f64
                },
                intra_batch_sim: batch_query_similarity(data, batch),
                seed: cfg.seed,
                eval: None,
            };
            if let Some(eval) = evaluate.as_mut() {
                if cfg.eval_every > 0 && (k.is_multiple_of(cfg.eval_every) || k == total) {
                    let m = eval(&state.params)?;
                    rec.eval = Some(m);
                    if best.is_none_or(|b| m > b) {
                        best = Some(m);
                        best_state = Some(state.clone());
                        stale = 0;
                    } else {
                        stale += 1;
                    }
                }
            }
            if let Some(f) = on_step.as_mut() {
                f(&rec)?;
            }
            records.push(rec);
            if cfg.eval_every > 0 && evaluate.is_some() && stale >= cfg.patience.max(1) {
                stopped_early = true;
                break 'outer;
            }
        }
    }
    if let Some(b) = best_state {
        state = b;
    }
    Ok(TrainOutcome {
        state,
        records,
        best_eval: best,
        stopped_early,
    })
}

fn divergence<T: Real>(
    data: &TrainData<T>,
    batch: &TrainBatch,
    state: &TrainState<T>,
    obj: &BatchObjective<T>,
    step: u64,
) -> Error {
    let dump = serde_json::json!({
        "step": step,
        "loss": obj.loss.as_f64().to_string(),
        "log_scale": state.log_scale.as_f64(),
        "params_finite": state.params.all_finite(),
        "grads_finite": obj.grads.all_finite(),
        "samples": batch.samples,
        "entities": batch.samples.iter().map(|&s| data.entity_ids[data.queries[s].entity].clone()).collect::<Vec<_>>(),
        "donors": batch.donors,
    });
    Error::Diverged {
        step: step as usize,
        message: format!("non-finite loss or gradient ({})", obj.loss),
        dump: dump.to_string(),
    }
}

#[cfg(test)]
mod tests;
