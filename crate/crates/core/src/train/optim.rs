use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Step decay `lr₀ · γ^⌊t/period⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub lr: f64,
    pub gamma: f64,
    pub period: usize,
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.gamma > 0.0 && self.gamma <= 1.0) || self.period == 0 {
            return Err(Error::Config(format!(
                "schedule needs lr > 0, decay in (0, 1] and period ≥ 1 (got {}, {}, {})",
                self.lr, self.gamma, self.period
            )));
        }
        Ok(())
    }

    pub fn at(&self, t: usize) -> f64 {
        self.lr * self.gamma.powi((t / self.period) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            ..Self::default()
        }
    }

    pub fn step<F: Scalar>(
        &mut self,
        params: &mut BTreeMap<String, Tensor<F>>,
        grads: &BTreeMap<String, Vec<F>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if g.len() != p.numel() {
                return Err(Error::Shape(format!(
                    "{name}: gradient of {} for {} values",
                    g.len(),
                    p.numel()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi.to_f64c();
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let upd = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *w = F::of(w.to_f64c() - upd);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

/// SGD with momentum, optional Nesterov look-ahead and L2 weight decay,
/// following the usual `buf ← μ·buf + g`, `d = g + μ·buf` convention.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub cfg: SgdConfig,
    bufs: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            bufs: BTreeMap::new(),
        }
    }

    pub fn step<F: Scalar>(
        &mut self,
        params: &mut BTreeMap<String, Tensor<F>>,
        grads: &BTreeMap<String, Vec<F>>,
        lr: f64,
    ) -> Result<()> {
        let SgdConfig {
            momentum,
            weight_decay,
            nesterov,
        } = self.cfg;
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if g.len() != p.numel() {
                return Err(Error::Shape(format!(
                    "{name}: gradient of {} for {} values",
                    g.len(),
                    p.numel()
                )));
            }
            let first = !self.bufs.contains_key(name);
            let buf = self
                .bufs
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((w, &gi), b) in p.data_mut().iter_mut().zip(g).zip(buf.iter_mut()) {
                let wv = w.to_f64c();
                let mut d = gi.to_f64c() + weight_decay * wv;
                if momentum != 0.0 {
                    *b = if first { d } else { momentum * *b + d };
                    d = if nesterov { d + momentum * *b } else { *b };
                }
                *w = F::of(wv - lr * d);
            }
        }
        Ok(())
    }
}
