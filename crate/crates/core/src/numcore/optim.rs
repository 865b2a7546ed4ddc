//! Parameter storage, Adam, cosine annealing, and EMA shadows.

use std::collections::BTreeMap;

use super::graph::GradMap;
use super::tensor::Tensor;
use super::NumError;

/// Adam hyperparameters. Defaults follow the standard (0.9, 0.999, 1e-8).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct ParamEntry {
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameter tensors with per-parameter Adam moment accumulators and
/// a shared step counter. Iteration order is the sorted name order, so all
/// derived byte streams are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.entries.insert(name.to_string(), ParamEntry { value, m, v });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Parameters in sorted-name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k, &e.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// All parameter values as little-endian bytes in sorted-name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * 4);
        for e in self.entries.values() {
            for &x in e.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Replace every parameter value from `other` (names must match).
    pub fn load_values(&mut self, other: &BTreeMap<String, Tensor>) -> Result<(), NumError> {
        for (name, t) in other {
            let entry = self
                .entries
                .get_mut(name)
                .ok_or_else(|| NumError::UnknownParam(name.clone()))?;
            if entry.value.shape() != t.shape() {
                return Err(NumError::ShapeMismatch(format!(
                    "parameter '{name}': {:?} vs {:?}",
                    entry.value.shape(),
                    t.shape()
                )));
            }
            entry.value = t.clone();
        }
        Ok(())
    }

    /// Clone just the parameter values.
    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.value.clone())).collect()
    }
}

/// One bias-corrected Adam step. Parameters whose gradient is absent from
/// `grads` are treated as zero-gradient and do not move.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradMap,
    lr: f32,
    cfg: &AdamConfig,
) -> Result<(), NumError> {
    assert!(lr > 0.0, "learning rate must be positive");
    params.step += 1;
    let t = params.step;
    // Bias corrections computed in f64; β^t underflows f32 for long runs.
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t as i32);
    for (name, entry) in params.entries.iter_mut() {
        let Some(grad) = grads.get(name) else { continue };
        if grad.shape() != entry.value.shape() {
            return Err(NumError::ShapeMismatch(format!(
                "gradient for '{name}': {:?} vs {:?}",
                grad.shape(),
                entry.value.shape()
            )));
        }
        let m = entry.m.data_mut();
        let v = entry.v.data_mut();
        let p = entry.value.data_mut();
        for i in 0..p.len() {
            let g = grad.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            p[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    Ok(())
}

/// Cosine annealing: lr0 · ½(1 + cos(π·step/total)).
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f32) -> Result<f32, NumError> {
    if total_steps == 0 || step > total_steps {
        return Err(NumError::Invalid(format!(
            "cosine_lr step {step} out of range 0..={total_steps}"
        )));
    }
    let x = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok((lr0 as f64 * 0.5 * (1.0 + x.cos())).max(0.0) as f32)
}

/// Shadow copies of a [`ParamSet`]'s parameters, updated as
/// shadow ← rate·shadow + (1−rate)·param.
#[derive(Debug, Clone)]
pub struct EmaSet {
    shadow: BTreeMap<String, Tensor>,
    rate: f32,
}

impl EmaSet {
    /// Initialize shadows as copies of the current parameters.
    pub fn new(params: &ParamSet, rate: f32) -> Self {
        assert!(rate > 0.0 && rate < 1.0, "EMA rate must be in (0,1)");
        EmaSet { shadow: params.values(), rate }
    }

    pub fn rate(&self) -> f32 {
        self.rate
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.shadow.get(name)
    }

    /// Shadow tensors, e.g. to serve as the final model.
    pub fn into_values(self) -> BTreeMap<String, Tensor> {
        self.shadow
    }

    pub fn values(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }
}

pub fn ema_update(ema: &mut EmaSet, params: &ParamSet) -> Result<(), NumError> {
    for (name, shadow) in ema.shadow.iter_mut() {
        let p = params
            .get(name)
            .ok_or_else(|| NumError::UnknownParam(name.clone()))?;
        if p.shape() != shadow.shape() {
            return Err(NumError::ShapeMismatch(format!(
                "EMA shadow for '{name}': {:?} vs {:?}",
                shadow.shape(),
                p.shape()
            )));
        }
        let rate = ema.rate;
        for (s, &v) in shadow.data_mut().iter_mut().zip(p.data()) {
            *s = rate * *s + (1.0 - rate) * v;
        }
    }
    Ok(())
}
