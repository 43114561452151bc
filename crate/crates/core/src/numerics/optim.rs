use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
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

/// AdamW moment accumulators, keyed by `"<group>.<param>"`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub config: AdamWConfig,
    step: u64,
    first: IndexMap<String, Tensor<T>>,
    second: IndexMap<String, Tensor<T>>,
}

/// One parameter group for an optimizer step.
pub struct ParamGroup<'a, T> {
    pub name: &'a str,
    pub params: &'a mut ParamStore<T>,
    pub grads: &'a [Tensor<T>],
}

impl<T: Real> OptState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.first
            .iter()
            .zip(self.second.values())
            .map(|((k, m), v)| (k.as_str(), m, v))
    }

    pub fn insert_moments(&mut self, key: String, m: Tensor<T>, v: Tensor<T>) -> Result<()> {
        if m.shape() != v.shape() {
            return Err(Error::shape("opt_state", format!("moment shapes for {key} differ")));
        }
        self.first.insert(key.clone(), m);
        self.second.insert(key, v);
        Ok(())
    }

    pub fn has_key_prefix(&self, prefix: &str) -> bool {
        self.first.keys().any(|k| k.starts_with(prefix))
    }
}

/// One decoupled-weight-decay Adam update over all groups; increments the
/// step counter once.
pub fn adamw_step<T: Real>(opt: &mut OptState<T>, groups: &mut [ParamGroup<'_, T>]) -> Result<()> {
    for g in groups.iter() {
        if g.grads.len() != g.params.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} grads for {} params in {}", g.grads.len(), g.params.len(), g.name),
            ));
        }
        for ((name, p), gr) in g.params.iter().zip(g.grads) {
            if p.shape() != gr.shape() {
                return Err(Error::shape("adamw_step", format!("gradient shape for {name}")));
            }
            if !gr.all_finite() {
                return Err(Error::NonFinite { op: "adamw_step" });
            }
        }
    }

    opt.step += 1;
    let c = opt.config;
    let t = opt.step as i32;
    let lr = T::from_f64c(c.lr);
    let b1 = T::from_f64c(c.beta1);
    let b2 = T::from_f64c(c.beta2);
    let eps = T::from_f64c(c.eps);
    let decay = T::one() - T::from_f64c(c.lr * c.weight_decay);
    let bc1 = T::from_f64c(1.0 - c.beta1.powi(t));
    let bc2 = T::from_f64c(1.0 - c.beta2.powi(t));

    for g in groups.iter_mut() {
        for ((name, p), gr) in g.params.iter_mut().zip(g.grads) {
            let key = format!("{}.{}", g.name, name);
            let shape = p.shape().to_vec();
            let m = opt.first.entry(key.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = opt.second.entry(key).or_insert_with(|| Tensor::zeros(shape));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(gr.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
