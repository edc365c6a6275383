use crate::error::{Error, Result};
use crate::tensor::{AttentionWeights, Matrix, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which inputs the adaptor is allowed to use. `Both` is the full model; the other two are
/// the single-modality ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    #[default]
    Both,
    /// Text is replaced by zeros, so only the patch stream reaches the output.
    ImageOnly,
    /// Mean of projected valid tokens, no attention blocks.
    TextOnly,
}

impl Guidance {
    pub fn code(self) -> u8 {
        match self {
            Guidance::Both => 0,
            Guidance::ImageOnly => 1,
            Guidance::TextOnly => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Guidance::Both),
            1 => Some(Guidance::ImageOnly),
            2 => Some(Guidance::TextOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptorConfig {
    /// Shared embedding dimension `D` (visual feature width).
    pub d_model: usize,
    /// Width `D_t` of the frozen text-encoder token embeddings.
    pub d_text: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub guidance: Guidance,
}

impl AdaptorConfig {
    /// Two blocks, 16 heads and a `4D` feed-forward width.
    pub fn new(d_model: usize, d_text: usize) -> Self {
        Self {
            d_model,
            d_text,
            layers: 2,
            heads: 16,
            d_ff: 4 * d_model,
            guidance: Guidance::Both,
        }
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn with_d_ff(mut self, d_ff: usize) -> Self {
        self.d_ff = d_ff;
        self
    }

    pub fn with_guidance(mut self, guidance: Guidance) -> Self {
        self.guidance = guidance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_text == 0 || self.d_ff == 0 || self.heads == 0 {
            return Err(Error::Config(format!(
                "all adaptor dims must be >= 1: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (d, dt, ff) = (self.d_model, self.d_text, self.d_ff);
        let per_layer = 4 * d * d + d * ff + ff + ff * d + d + 4 * d;
        dt * d + self.layers * per_layer
    }
}

/// Weights of one cross-attention decoder block (pre-norm, residual).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: Matrix<T>,
    pub ln1_beta: Matrix<T>,
    pub attn: AttentionWeights<T>,
    pub ln2_gamma: Matrix<T>,
    pub ln2_beta: Matrix<T>,
    pub ff_w1: Matrix<T>,
    pub ff_b1: Matrix<T>,
    pub ff_w2: Matrix<T>,
    pub ff_b2: Matrix<T>,
}

impl<T: Real> LayerParams<T> {
    fn zeros(cfg: &AdaptorConfig) -> Self {
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        Self {
            ln1_gamma: Matrix::zeros(1, d),
            ln1_beta: Matrix::zeros(1, d),
            attn: AttentionWeights {
                w_q: Matrix::zeros(d, d),
                w_k: Matrix::zeros(d, d),
                w_v: Matrix::zeros(d, d),
                w_o: Matrix::zeros(d, d),
            },
            ln2_gamma: Matrix::zeros(1, d),
            ln2_beta: Matrix::zeros(1, d),
            ff_w1: Matrix::zeros(d, ff),
            ff_b1: Matrix::zeros(1, ff),
            ff_w2: Matrix::zeros(ff, d),
            ff_b2: Matrix::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Matrix<T>; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.attn.w_q,
            &self.attn.w_k,
            &self.attn.w_v,
            &self.attn.w_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.ff_w1,
            &self.ff_b1,
            &self.ff_w2,
            &self.ff_b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix<T>; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.attn.w_q,
            &mut self.attn.w_k,
            &mut self.attn.w_v,
            &mut self.attn.w_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.ff_w1,
            &mut self.ff_b1,
            &mut self.ff_w2,
            &mut self.ff_b2,
        ]
    }
}

const LAYER_TENSOR_NAMES: [&str; 12] = [
    "ln1_gamma",
    "ln1_beta",
    "attn_w_q",
    "attn_w_k",
    "attn_w_v",
    "attn_w_o",
    "ln2_gamma",
    "ln2_beta",
    "ff_w1",
    "ff_b1",
    "ff_w2",
    "ff_b2",
];

/// All trainable weights of the adaptor.
///
/// The same type doubles as a gradient accumulator and as optimizer moment storage.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorParams<T = f32> {
    pub config: AdaptorConfig,
    /// `D_t×D` token projection.
    pub w_proj: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> AdaptorParams<T> {
    /// All-zero tensors with the shapes `config` implies.
    pub fn zeros(config: AdaptorConfig) -> Self {
        Self {
            config,
            w_proj: Matrix::zeros(config.d_text, config.d_model),
            layers: (0..config.layers)
                .map(|_| LayerParams::zeros(&config))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Tensors in their persisted order: `w_proj`, then each layer's twelve tensors.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.w_proj];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.w_proj];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["w_proj".to_string()];
        for i in 0..self.layers.len() {
            out.extend(LAYER_TENSOR_NAMES.iter().map(|n| format!("layer{i}.{n}")));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> AdaptorParams<U> {
        let mut out = AdaptorParams::<U>::zeros(self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        for t in self.tensors_mut() {
            t.fill(v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Squared L2 norm over every tensor.
    pub fn sum_squares(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|&v| v * v)
            .sum()
    }
}

/// Xavier-uniform weights, zero biases, unit layer-norm gains. Deterministic in `seed`.
pub fn init_params<T: Real>(seed: u64, config: AdaptorConfig) -> Result<AdaptorParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = AdaptorParams::zeros(config);
    xavier(&mut p.w_proj, &mut rng);
    for l in &mut p.layers {
        l.ln1_gamma.fill(T::one());
        l.ln2_gamma.fill(T::one());
        xavier(&mut l.attn.w_q, &mut rng);
        xavier(&mut l.attn.w_k, &mut rng);
        xavier(&mut l.attn.w_v, &mut rng);
        xavier(&mut l.attn.w_o, &mut rng);
        xavier(&mut l.ff_w1, &mut rng);
        xavier(&mut l.ff_w2, &mut rng);
    }
    Ok(p)
}

/// Bound `sqrt(6 / (fan_in + fan_out))` for a `fan_in×fan_out` weight.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn xavier<T: Real>(m: &mut Matrix<T>, rng: &mut ChaCha8Rng) {
    let bound = xavier_bound(m.rows(), m.cols());
    for v in m.data_mut() {
        *v = T::lit(rng.random_range(-bound..bound));
    }
}
