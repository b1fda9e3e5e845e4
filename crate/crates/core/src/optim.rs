//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::params::ParamMap;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Moments and step count, keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Real = f64> {
    pub config: AdamWConfig,
    pub m: ParamMap<T>,
    pub v: ParamMap<T>,
    pub step: u64,
    /// Learning rate of the most recent step.
    pub lr: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, m: ParamMap::new(), v: ParamMap::new(), step: 0, lr: 0.0 }
    }
}

/// One AdamW update of every parameter in `grads`.
///
/// `p <- p (1 - lr wd)`, then `p <- p - a_t m / (sqrt(v) + eps)` with
/// `a_t = lr sqrt(1 - b2^t) / (1 - b1^t)`.
pub fn adamw_step<T: Real>(params: &mut ParamMap<T>, grads: &ParamMap<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    for (name, g) in grads {
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            Some(p) => bail!(Contract, "gradient {} has shape {:?}, parameter has {:?}", name, g.shape(), p.shape()),
            None => bail!(Contract, "gradient for unknown parameter {}", name),
        }
    }
    let c = state.config;
    state.step += 1;
    state.lr = lr;
    let t = state.step as f64;
    let step_size = lr * libm::sqrt(1.0 - libm::pow(c.beta2, t)) / (1.0 - libm::pow(c.beta1, t));
    let decay = T::from_f64(1.0 - lr * c.weight_decay);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (a, eps) = (T::from_f64(step_size), T::from_f64(c.eps));
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let it = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
        for (((p, m), v), &g) in it {
            *p *= decay;
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p -= a * *m / (v.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub min_lr: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr >= 0.0
            && self.min_lr >= 0.0
            && self.warmup_epochs >= 0.0
            && self.total_epochs > 0.0
            && self.warmup_epochs <= self.total_epochs;
        if !ok {
            bail!(Config, "invalid schedule {:?}", self);
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr`.
pub fn lr_at(epoch: f64, s: &Schedule) -> Result<f64> {
    s.validate()?;
    if !(0.0..=s.total_epochs).contains(&epoch) {
        bail!(Contract, "epoch {} outside [0, {}]", epoch, s.total_epochs);
    }
    if epoch < s.warmup_epochs {
        return Ok(s.base_lr * epoch / s.warmup_epochs);
    }
    let span = s.total_epochs - s.warmup_epochs;
    let progress = if span > 0.0 { (epoch - s.warmup_epochs) / span } else { 1.0 };
    Ok(s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + libm::cos(core::f64::consts::PI * progress)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;

    fn single(v: f64) -> ParamMap<f64> {
        [(String::from("w"), Tensor::full(&[3], v))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = single(2.0);
        let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        let mut st = OptimizerState::new(cfg);
        adamw_step(&mut p, &single(0.0), &mut st, 0.01).unwrap();
        assert_eq!(p["w"].data(), &[2.0 * (1.0 - 0.01 * 0.1); 3]);

        let mut p = single(2.0);
        let mut st = OptimizerState::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        adamw_step(&mut p, &single(0.0), &mut st, 0.01).unwrap();
        assert_eq!(p["w"].data(), &[2.0; 3]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = single(1.0);
        let g: ParamMap<f64> = [(String::from("w"), Tensor::zeros(&[2]))].into_iter().collect();
        let mut st = OptimizerState::new(AdamWConfig::default());
        assert!(matches!(adamw_step(&mut p, &g, &mut st, 0.1), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn schedule_boundaries() {
        let s = Schedule { base_lr: 1e-3, warmup_epochs: 5.0, total_epochs: 50.0, min_lr: 1e-6 };
        assert_eq!(lr_at(0.0, &s).unwrap(), 0.0);
        assert_eq!(lr_at(5.0, &s).unwrap(), 1e-3);
        assert!((lr_at(50.0, &s).unwrap() - 1e-6).abs() < 1e-18);
        assert!((lr_at(27.5, &s).unwrap() - (1e-3 + 1e-6) / 2.0).abs() < 1e-15);
        assert!(matches!(lr_at(50.5, &s), Err(crate::Error::Contract(_))));
        assert!(matches!(lr_at(-0.1, &s), Err(crate::Error::Contract(_))));
    }
}
