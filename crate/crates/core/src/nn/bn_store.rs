use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stored statistics of one BN layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnLayerStats {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BnLayerStats {
    /// `σ = √(var + eps)`.
    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| (v + self.eps).sqrt()).collect()
    }
}

/// Read-only snapshot of every BN layer's running statistics, taken once
/// pretraining is over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStore {
    layers: Vec<BnLayerStats>,
}

impl BnStore {
    pub(crate) fn new(layers: Vec<BnLayerStats>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Degenerate("model has no batch-norm layers".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[BnLayerStats] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, k: usize) -> Option<&BnLayerStats> {
        self.layers.get(k)
    }
}
