use crate::tensor::Real;

use super::params::ParamStore;

/// Smallest learning rate the schedule decays to.
pub const LR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every plane in the store.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, lr: f64, cfg: AdamConfig) {
    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let lr = T::lit(lr);
    let eps = T::lit(cfg.eps);
    let one = T::one();
    for (_, p) in store.iter_mut() {
        for pl in &mut p.planes {
            let g = pl.grad.data();
            let m = pl.m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (one - b1) * gi;
            }
            let v = pl.v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            let (m, v) = (pl.m.data(), pl.v.data());
            for ((x, &mi), &vi) in pl.value.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / c1;
                let vhat = vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Halves the learning rate when the newest validation loss is worse than
/// every earlier one.
pub fn lr_schedule(current: f64, history: &[f64]) -> f64 {
    let Some((&last, earlier)) = history.split_last() else {
        return current;
    };
    let best = earlier.iter().copied().fold(f64::INFINITY, f64::min);
    if last > best {
        (current * 0.5).max(LR_FLOOR)
    } else {
        current
    }
}
