use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::nets::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescales the gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Learning rates for parameter-name prefixes; the longest match wins.
    pub lr_overrides: BTreeMap<String, f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            lr_overrides: BTreeMap::new(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(invalid(format!("invalid optimizer settings {self:?}")));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(invalid("clip_norm must be positive"));
        }
        if let Some((p, lr)) = self.lr_overrides.iter().find(|(_, lr)| !(**lr > 0.0)) {
            return Err(invalid(format!(
                "learning rate for `{p}` must be positive, got {lr}"
            )));
        }
        Ok(())
    }

    /// Learning rate applied to parameter `name`.
    pub fn lr_for(&self, name: &str) -> f64 {
        self.lr_overrides
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(self.lr, |(_, lr)| *lr)
    }
}

/// Bias-corrected adaptive moment estimation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Applies one update. Gradients must target trainable parameters only;
/// parameters without a gradient are left alone.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    adam: &mut Adam,
) -> Result<()> {
    for (name, g) in grads {
        let p = store
            .param(name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        if p.frozen {
            return Err(Error::FrozenGradient(name.clone()));
        }
        if p.tensor.shape() != g.shape() {
            return Err(Error::Shape {
                op: "optimizer-step",
                lhs: p.tensor.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let c = adam.config.clone();
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let scale = match c.clip_norm {
        Some(max) if norm > max => max / norm,
        _ => 1.0,
    };
    adam.step += 1;
    let t = adam.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, g) in grads {
        let lr = c.lr_for(name);
        let shape = g.shape().to_vec();
        let m = adam
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        let v = adam
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        let w = store.tensor_mut_unchecked(name).expect("checked above");
        for (((w, m), v), &g) in w
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            let g = g * scale;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        }
    }
    Ok(())
}
