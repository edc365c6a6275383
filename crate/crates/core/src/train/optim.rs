use crate::tensor::Real;
use crate::vgka::AdaptorParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `base_lr · ½(1 + cos(π·step/total))`, no warmup. `step` is clamped to `total`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam moments for every adaptor tensor plus the log logit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: AdaptorParams<T>,
    pub v: AdaptorParams<T>,
    pub m_scale: T,
    pub v_scale: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(like: &AdaptorParams<T>) -> Self {
        Self {
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
            m_scale: T::zero(),
            v_scale: T::zero(),
        }
    }
}

#[inline]
fn adam_scalar<T: Real>(p: &mut T, g: T, m: &mut T, v: &mut T, lr: T, c1: T, c2: T) {
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    *m = b1 * *m + (T::one() - b1) * g;
    *v = b2 * *v + (T::one() - b2) * g * g;
    let mhat = *m / c1;
    let vhat = *v / c2;
    *p -= lr * mhat / (vhat.sqrt() + T::lit(ADAM_EPS));
}

/// One bias-corrected Adam step (β₁ 0.9, β₂ 0.999, ε 1e-8, no weight decay).
/// `scale` is the log logit scale and is updated only when `scale_grad` is given.
pub fn adam_update<T: Real>(
    params: &mut AdaptorParams<T>,
    grads: &AdaptorParams<T>,
    scale: &mut T,
    scale_grad: Option<T>,
    state: &mut AdamState<T>,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::one() - T::lit(ADAM_BETA1).powi(t);
    let c2 = T::one() - T::lit(ADAM_BETA2).powi(t);
    let lr = T::lit(lr);
    let ps = params.tensors_mut();
    let gs = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            adam_scalar(p, g, m, v, lr, c1, c2);
        }
    }
    if let Some(g) = scale_grad {
        adam_scalar(scale, g, &mut state.m_scale, &mut state.v_scale, lr, c1, c2);
    }
}
