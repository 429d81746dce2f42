use serde::{Deserialize, Serialize};

use super::params::{DequantMode, Granularity, QuantParams};
use crate::error::{Error, Result};

/// EMA of per-batch activation min/max, frozen into [`QuantParams`] after a
/// fixed number of observed batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeTracker {
    min: f64,
    max: f64,
    momentum: f64,
    batches: usize,
    warmup: usize,
    frozen: Option<QuantParams>,
}

impl RangeTracker {
    pub fn new(momentum: f64, warmup: usize) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!(
                "EMA momentum {momentum} outside (0, 1)"
            )));
        }
        if warmup == 0 {
            return Err(Error::Config("warm-up needs at least one batch".into()));
        }
        Ok(Self {
            min: 0.0,
            max: 0.0,
            momentum,
            batches: 0,
            warmup,
            frozen: None,
        })
    }

    /// Folds one batch's extrema into the running range. The first batch
    /// initializes it; later ones blend as `r ← m·r + (1 − m)·batch`.
    pub fn observe(&mut self, lo: f64, hi: f64) -> Result<()> {
        if self.frozen.is_some() {
            return Err(Error::Frozen("activation range already frozen".into()));
        }
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::Numerical(format!(
                "invalid batch range [{lo}, {hi}]"
            )));
        }
        if self.batches == 0 {
            self.min = lo;
            self.max = hi;
        } else {
            let m = self.momentum;
            self.min = m * self.min + (1.0 - m) * lo;
            self.max = m * self.max + (1.0 - m) * hi;
        }
        self.batches += 1;
        Ok(())
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        (self.batches > 0).then_some((self.min, self.max))
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn warmup_done(&self) -> bool {
        self.batches >= self.warmup
    }

    pub fn frozen(&self) -> Option<&QuantParams> {
        self.frozen.as_ref()
    }

    pub fn freeze(&mut self, bits: u32, dequant: DequantMode) -> Result<QuantParams> {
        if let Some(qp) = self.frozen {
            return Ok(qp);
        }
        let (lo, hi) = self
            .range()
            .ok_or_else(|| Error::Degenerate("no batches observed before freezing".into()))?;
        let (lo, hi) = expand_degenerate(lo, hi);
        let qp = QuantParams::compute(lo, hi, bits, Granularity::PerTensor)?.with_dequant(dequant);
        self.frozen = Some(qp);
        Ok(qp)
    }
}

/// Widens an empty range `[v, v]` so that `v` itself stays representable.
pub fn expand_degenerate(lo: f64, hi: f64) -> (f64, f64) {
    if lo < hi {
        return (lo, hi);
    }
    let eps = (lo.abs() * 1e-6).max(1e-8);
    (lo - eps, hi + eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_blends_after_first_batch() {
        let mut t = RangeTracker::new(0.9, 3).unwrap();
        t.observe(-1.0, 1.0).unwrap();
        t.observe(-2.0, 3.0).unwrap();
        let (lo, hi) = t.range().unwrap();
        assert!((lo + 1.1).abs() < 1e-12 && (hi - 1.2).abs() < 1e-12);
        assert!(!t.warmup_done());
    }

    #[test]
    fn frozen_tracker_rejects_updates() {
        let mut t = RangeTracker::new(0.9, 1).unwrap();
        t.observe(0.0, 2.0).unwrap();
        let qp = t.freeze(4, DequantMode::OffsetCorrected).unwrap();
        assert_eq!(t.freeze(4, DequantMode::OffsetCorrected).unwrap(), qp);
        assert!(matches!(t.observe(0.0, 1.0), Err(Error::Frozen(_))));
    }

    #[test]
    fn freezing_without_data_fails() {
        let mut t = RangeTracker::new(0.9, 1).unwrap();
        assert!(t.freeze(4, DequantMode::OffsetCorrected).is_err());
    }
}
