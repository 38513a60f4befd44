use std::collections::BTreeMap;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// First and second moments per parameter plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = |p: &ModelParams<T>| p.iter().map(|(k, t)| (k.clone(), vec![T::zero(); t.numel()])).collect();
        AdamState {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    pub fn moments_as_params(&self, which: &BTreeMap<String, Vec<T>>, shapes: &ModelParams<T>) -> ModelParams<T> {
        ModelParams::from_map(
            shapes
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::from_parts(t.shape().to_vec(), which[k].clone())))
                .collect(),
        )
    }
}

/// Bias-corrected Adam step. Parameters without a gradient entry are
/// treated as having zero gradient.
pub fn adam_update<T: Real>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::invalid(format!(
            "learning rate {lr} must be finite and non-negative"
        )));
    }
    state.t += 1;
    let b1 = T::of(ADAM_BETA1);
    let b2 = T::of(ADAM_BETA2);
    let one = T::one();
    let c1 = T::of(1.0 - ADAM_BETA1.powf(state.t as f64));
    let c2 = T::of(1.0 - ADAM_BETA2.powf(state.t as f64));
    let eps = T::of(ADAM_EPS);
    let lr = T::of(lr);
    for (name, p) in params.iter_mut() {
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            return Err(Error::invalid(format!("optimizer has no moments for {name}")));
        };
        let g = grads.get(name);
        if let Some(g) = g {
            if g.len() != m.len() {
                return Err(Error::Shape {
                    op: "adam_update",
                    left: vec![g.len()],
                    right: vec![m.len()],
                });
            }
        }
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(T::zero(), |g| g[i]);
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `d^-0.5 · min(s^-0.5, s · w^-1.5)` for step `s ≥ 1`.
pub fn noam_lr(step: u64, model_dim: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// `θ_t ← λ θ_t + (1 − λ) θ_o`, parameter-wise.
pub fn ema_update<T: Real>(target: &mut ModelParams<T>, online: &ModelParams<T>, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("EMA momentum {lambda} not in [0, 1]")));
    }
    if !target.same_layout(online) {
        return Err(Error::invalid("online and target parameter layouts differ"));
    }
    let l = T::of(lambda);
    let r = T::of(1.0 - lambda);
    let sources: Vec<_> = online.iter().map(|(_, t)| t.clone()).collect();
    for ((_, t), o) in target.iter_mut().zip(sources) {
        for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
            *a = l * *a + r * b;
        }
    }
    Ok(())
}
