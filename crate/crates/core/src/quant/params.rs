use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// How dequantization treats the zero-point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DequantMode {
    /// `x̄ = (x_q + Z)·S`, the exact inverse of the forward map.
    #[default]
    OffsetCorrected,
    /// `x̄ = x_q·S`, ignoring the offset. Kept for comparison only; it is
    /// off by `Z·S` whenever the range does not start at zero.
    Printed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerTensor,
    PerChannel {
        axis: usize,
    },
}

/// Asymmetric uniform quantization parameters for one tensor (or channel).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub scale: f64,
    /// Integer offset subtracted before rounding; may be negative.
    pub zero_point: i64,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub dequant: DequantMode,
}

/// Round half away from zero, independent of platform defaults.
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

impl QuantParams {
    /// `S = (β − α)/(2^N − 1)`, `Z = round(α/S)`.
    pub fn compute(
        clip_lo: f64,
        clip_hi: f64,
        bits: u32,
        granularity: Granularity,
    ) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::Config(format!(
                "bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
            )));
        }
        if !clip_lo.is_finite() || !clip_hi.is_finite() || clip_lo >= clip_hi {
            return Err(Error::Range(format!(
                "clip range [{clip_lo}, {clip_hi}] is empty"
            )));
        }
        let scale = (clip_hi - clip_lo) / Self::levels_of(bits) as f64;
        let zero_point = round_half_away(clip_lo / scale) as i64;
        Ok(Self {
            bits,
            clip_lo,
            clip_hi,
            scale,
            zero_point,
            granularity,
            dequant: DequantMode::default(),
        })
    }

    fn levels_of(bits: u32) -> u32 {
        (1u32 << bits) - 1
    }

    /// Largest code, `2^N − 1`.
    pub fn max_code(&self) -> u32 {
        Self::levels_of(self.bits)
    }

    pub fn with_dequant(mut self, mode: DequantMode) -> Self {
        self.dequant = mode;
        self
    }

    /// `clamp(round(x/S − Z), 0, 2^N − 1)`.
    #[inline]
    pub fn quantize_value(&self, x: f64) -> u32 {
        let code = round_half_away(x / self.scale - self.zero_point as f64);
        code.clamp(0.0, self.max_code() as f64) as u32
    }

    #[inline]
    pub fn dequantize_value(&self, code: u32) -> f64 {
        match self.dequant {
            DequantMode::OffsetCorrected => (code as f64 + self.zero_point as f64) * self.scale,
            DequantMode::Printed => code as f64 * self.scale,
        }
    }

    #[inline]
    pub fn fake_quantize_value(&self, x: f64) -> f64 {
        self.dequantize_value(self.quantize_value(x))
    }

    /// Straight-through pass region `α ≤ x ≤ β`.
    #[inline]
    pub fn passes(&self, x: f64) -> bool {
        x >= self.clip_lo && x <= self.clip_hi
    }
}

/// Integer codes of `x` under `qp`.
pub fn quantize<F: Scalar>(x: &Tensor<F>, qp: &QuantParams) -> Vec<u32> {
    x.data()
        .iter()
        .map(|v| qp.quantize_value(v.to_f64c()))
        .collect()
}

pub fn dequantize<F: Scalar>(
    codes: &[u32],
    shape: &[usize],
    qp: &QuantParams,
) -> Result<Tensor<F>> {
    if let Some(&c) = codes.iter().find(|&&c| c > qp.max_code()) {
        return Err(Error::Range(format!("code {c} exceeds {}", qp.max_code())));
    }
    Tensor::new(
        shape,
        codes
            .iter()
            .map(|&c| F::of(qp.dequantize_value(c)))
            .collect(),
    )
}

/// Quantize-dequantize in the forward pass with a clipped straight-through
/// gradient: identity inside `[α, β]`, zero outside.
pub fn fake_quantize<'t, F: Scalar>(x: Var<'t, F>, qp: &QuantParams) -> Result<Var<'t, F>> {
    let v = x.to_vec();
    let forward = v
        .iter()
        .map(|&e| F::of(qp.fake_quantize_value(e.to_f64c())))
        .collect();
    let pass = v.iter().map(|&e| qp.passes(e.to_f64c())).collect();
    x.straight_through(forward, pass)
}

/// Per-channel variant: `params[c]` applies to slice `c` along axis 0.
pub fn fake_quantize_per_channel<'t, F: Scalar>(
    x: Var<'t, F>,
    params: &[QuantParams],
) -> Result<Var<'t, F>> {
    let v = x.to_vec();
    let per = v.len() / params.len().max(1);
    if per * params.len() != v.len() {
        return Err(Error::Shape(format!(
            "{} channel parameters for {} elements",
            params.len(),
            v.len()
        )));
    }
    let mut forward = Vec::with_capacity(v.len());
    let mut pass = Vec::with_capacity(v.len());
    for (c, chunk) in v.chunks(per).enumerate() {
        let qp = &params[c];
        for &e in chunk {
            forward.push(F::of(qp.fake_quantize_value(e.to_f64c())));
            pass.push(qp.passes(e.to_f64c()));
        }
    }
    x.straight_through(forward, pass)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_scale_case() {
        let qp = QuantParams::compute(0.0, 15.0, 4, Granularity::PerTensor).unwrap();
        assert_eq!(qp.scale, 1.0);
        assert_eq!(qp.zero_point, 0);
        assert_eq!(qp.quantize_value(7.3), 7);
    }

    #[test]
    fn symmetric_range_zero_point() {
        let qp = QuantParams::compute(-1.0, 1.0, 4, Granularity::PerTensor).unwrap();
        assert!((qp.scale - 2.0 / 15.0).abs() <= f64::EPSILON);
        // round(-7.5) = -8 with ties away from zero
        assert_eq!(qp.zero_point, -8);
        assert_eq!(qp.quantize_value(-100.0), 0);
        assert_eq!(qp.quantize_value(100.0), 15);
    }

    #[test]
    fn rejects_bad_ranges_and_bits() {
        assert!(matches!(
            QuantParams::compute(1.0, 1.0, 4, Granularity::PerTensor),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            QuantParams::compute(2.0, 1.0, 4, Granularity::PerTensor),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            QuantParams::compute(0.0, 1.0, 1, Granularity::PerTensor),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            QuantParams::compute(0.0, 1.0, 9, Granularity::PerTensor),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lower_bound_on_grid_maps_to_code_zero() {
        let qp = QuantParams::compute(-0.75, 0.75, 2, Granularity::PerTensor).unwrap();
        assert_eq!(qp.scale, 0.5);
        assert_eq!(qp.zero_point, -2);
        assert_eq!(qp.quantize_value(-0.75), 1);
        let qp = QuantParams::compute(-1.0, 2.0, 2, Granularity::PerTensor).unwrap();
        assert_eq!((qp.scale, qp.zero_point), (1.0, -1));
        assert_eq!(qp.quantize_value(-1.0), 0);
        assert_eq!(qp.dequantize_value(0), -1.0);
    }

    #[test]
    fn printed_mode_drops_the_offset() {
        let qp = QuantParams::compute(-1.0, 2.0, 2, Granularity::PerTensor)
            .unwrap()
            .with_dequant(DequantMode::Printed);
        assert_eq!(qp.dequantize_value(0), 0.0);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_away(0.5), 1.0);
        assert_eq!(round_half_away(-0.5), -1.0);
        assert_eq!(round_half_away(2.5), 3.0);
    }
}
