use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Real, Tensor};

use super::TrainConfig;

/// Learning-rate multiplier: linear warmup to 1 at `warmup`, then linear
/// decay to 0 at `total`.
pub fn lr_multiplier(step: u64, warmup: u64, total: u64) -> f64 {
    let s = step as f64;
    let up = if warmup == 0 { 1.0 } else { s / warmup as f64 };
    let down = if total <= warmup { 1.0 } else { (total as f64 - s) / (total - warmup) as f64 };
    up.min(down).clamp(0.0, 1.0)
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (name, t) in params.iter() {
            m.insert(name, Tensor::zeros(t.shape().to_vec()));
            v.insert(name, Tensor::zeros(t.shape().to_vec()));
        }
        AdamState { m, v }
    }
}

/// One Adam update with bias correction and decoupled weight decay, at the
/// scheduled learning rate for `step` (counted from 1). Parameters without a
/// gradient slot are left alone. Returns the learning rate used.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, state: &mut AdamState<T>, cfg: &TrainConfig, step: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidArgument("optimizer steps are counted from 1".into()));
    }
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { param: name.to_string(), index: i, step });
            }
        }
    }
    let lr = cfg.learning_rate * lr_multiplier(step, cfg.warmup_steps, cfg.total_steps);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    for (name, t) in params.iter_mut() {
        let Some(g) = t.take_grad() else { continue };
        let m = state.m.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("no optimizer state for `{name}`")))?;
        let m = m.data_mut();
        let v = state.v.get_mut(name).expect("moments are created together").data_mut();
        for (i, p) in t.data_mut().iter_mut().enumerate() {
            let gi = g[i].as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = T::from_f64_lossy(mi);
            v[i] = T::from_f64_lossy(vi);
            let update = (mi / c1) / ((vi / c2).sqrt() + cfg.epsilon) + cfg.weight_decay * p.as_f64();
            *p = T::from_f64_lossy(p.as_f64() - lr * update);
        }
    }
    Ok(lr)
}
