use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// Adversarial-training defaults.
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state over one or more parameter sets.
///
/// Moments are keyed by parameter name, so the sets passed to
/// [`Adam::step`] must use disjoint names.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `sets`, then clears the
    /// gradients. Fails without touching anything if a gradient is missing.
    pub fn step(&mut self, sets: &mut [&mut ParameterSet<T>]) -> Result<()> {
        for set in sets.iter() {
            if let Some((name, _)) = set.iter().find(|(_, t)| t.grad.is_none()) {
                return Err(AutodiffError::MissingGrad(name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let lr_t = T::from_f64(c.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        for set in sets.iter_mut() {
            for (name, p) in set.iter_mut() {
                let grad = p.grad.take().expect("checked above");
                let m = self
                    .first
                    .entry(name.clone())
                    .or_insert_with(|| vec![T::zero(); grad.len()]);
                let v = self
                    .second
                    .entry(name.clone())
                    .or_insert_with(|| vec![T::zero(); grad.len()]);
                for (((w, g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                    *mi = b1 * *mi + ob1 * *g;
                    *vi = b2 * *vi + ob2 * *g * *g;
                    *w = *w - lr_t * *mi / ((*vi * inv_bc2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Moment buffers as named flat arrays, for checkpointing.
    pub fn export(&self) -> (u64, Vec<(String, Vec<T>)>) {
        let mut out = Vec::new();
        for (k, v) in &self.first {
            out.push((format!("m/{k}"), v.clone()));
        }
        for (k, v) in &self.second {
            out.push((format!("v/{k}"), v.clone()));
        }
        (self.step, out)
    }

    pub fn import(&mut self, step: u64, entries: Vec<(String, Vec<T>)>) -> Result<()> {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (k, v) in entries {
            if let Some(name) = k.strip_prefix("m/") {
                self.first.insert(name.to_string(), v);
            } else if let Some(name) = k.strip_prefix("v/") {
                self.second.insert(name.to_string(), v);
            } else {
                return Err(AutodiffError::Checkpoint(format!(
                    "unexpected optimizer entry `{k}`"
                )));
            }
        }
        Ok(())
    }
}
