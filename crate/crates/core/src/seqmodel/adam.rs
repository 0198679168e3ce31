use crate::real::Real;

use super::Parameters;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<A> {
    pub step: u64,
    pub m: Parameters<A>,
    pub v: Parameters<A>,
}

impl<A: Real> AdamState<A> {
    pub fn new(params: &Parameters<A>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One AdamW update: decoupled decay `p ← p(1 − lr·wd)` followed by the
/// bias-corrected Adam step. Decay applies to every tensor.
pub fn adam_step<A: Real>(params: &mut Parameters<A>, grads: &Parameters<A>, state: &mut AdamState<A>, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as f64;
    let lr = A::of(cfg.lr);
    let decay = A::of(1.0 - cfg.lr * cfg.weight_decay);
    let (b1, b2) = (A::of(cfg.beta1), A::of(cfg.beta2));
    let (c1, c2) = (A::of(1.0 - cfg.beta1.powf(t)), A::of(1.0 - cfg.beta2.powf(t)));
    let eps = A::of(cfg.eps);
    let one = A::one();
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((mut p, g), mut m), mut v) in tensors {
        ndarray::Zip::from(&mut p)
            .and(&g)
            .and(&mut m)
            .and(&mut v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p = *p * decay - lr * mhat / (vhat.sqrt() + eps);
            });
    }
}
