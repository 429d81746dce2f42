//! Asymmetric uniform quantization with straight-through fake quantization.

mod params;
mod tracker;
mod wrap;

pub use params::{
    dequantize, fake_quantize, fake_quantize_per_channel, quantize, round_half_away, DequantMode,
    Granularity, QuantParams, MAX_BITS, MIN_BITS,
};
pub use tracker::{expand_degenerate, RangeTracker};
pub use wrap::{
    calibrate_weights, quant_report, unwrap_model, weight_qparams, wrap_model, QuantState,
    WeightQuant,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit-widths and range-estimation settings of a quantized model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    #[serde(default)]
    pub per_channel: bool,
    #[serde(default)]
    pub dequant: DequantMode,
    pub ema_momentum: f64,
    pub warmup_batches: usize,
}

impl QuantConfig {
    pub fn new(weight_bits: u32, act_bits: u32) -> Self {
        Self {
            weight_bits,
            act_bits,
            per_channel: false,
            dequant: DequantMode::OffsetCorrected,
            ema_momentum: 0.9,
            warmup_batches: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, b) in [("weight", self.weight_bits), ("activation", self.act_bits)] {
            if !(MIN_BITS..=MAX_BITS).contains(&b) {
                return Err(Error::Config(format!(
                    "{what} bit-width {b} outside [{MIN_BITS}, {MAX_BITS}]"
                )));
            }
        }
        RangeTracker::new(self.ema_momentum, self.warmup_batches).map(|_| ())
    }
}
