use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::params::{Granularity, QuantParams};
use super::tracker::{expand_degenerate, RangeTracker};
use super::QuantConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerKind, Model};
use crate::tensor::{Scalar, Tensor};

/// Fake-quantization state carried by a wrapped model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    pub config: QuantConfig,
    /// One range tracker per activation-function layer, keyed by layer name.
    pub sites: BTreeMap<String, RangeTracker>,
}

impl QuantState {
    pub fn all_frozen(&self) -> bool {
        self.sites.values().all(|s| s.frozen().is_some())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WeightQuant {
    PerTensor(QuantParams),
    PerChannel(Vec<QuantParams>),
}

fn min_max_f64<F: Scalar>(v: &[F]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
            let e = e.to_f64c();
            (lo.min(e), hi.max(e))
        })
}

fn range_params(
    lo: f64,
    hi: f64,
    bits: u32,
    granularity: Granularity,
    cfg: &QuantConfig,
) -> Result<QuantParams> {
    if lo == hi {
        log::warn!("constant weight tensor at {lo}; expanding its quantization range");
    }
    let (lo, hi) = expand_degenerate(lo, hi);
    Ok(QuantParams::compute(lo, hi, bits, granularity)?.with_dequant(cfg.dequant))
}

/// Min/max quantization parameters of one weight tensor.
pub fn weight_qparams<F: Scalar>(w: &Tensor<F>, cfg: &QuantConfig) -> Result<WeightQuant> {
    if !w.is_finite() {
        return Err(Error::Numerical("non-finite weight".into()));
    }
    if cfg.per_channel && w.shape().len() > 1 {
        let per = w.numel() / w.shape()[0];
        let qps = w
            .data()
            .chunks(per)
            .map(|c| {
                let (lo, hi) = min_max_f64(c);
                range_params(
                    lo,
                    hi,
                    cfg.weight_bits,
                    Granularity::PerChannel { axis: 0 },
                    cfg,
                )
            })
            .collect::<Result<_>>()?;
        return Ok(WeightQuant::PerChannel(qps));
    }
    let (lo, hi) = min_max_f64(w.data());
    Ok(WeightQuant::PerTensor(range_params(
        lo,
        hi,
        cfg.weight_bits,
        Granularity::PerTensor,
        cfg,
    )?))
}

fn weight_names<F: Scalar>(model: &Model<F>) -> Vec<String> {
    let mut out = Vec::new();
    for l in model.layers() {
        match &l.kind {
            LayerKind::Conv { .. } | LayerKind::Linear { .. } => {
                out.push(format!("{}.weight", l.name))
            }
            LayerKind::Attention { spec } => {
                for part in ["local", "long", "channel"] {
                    out.push(format!("{}.{part}.weight", l.name));
                }
                if spec.bottleneck > 1 {
                    out.push(format!("{}.expand.weight", l.name));
                }
            }
            _ => {}
        }
    }
    out
}

/// Quantization parameters of every conv/linear weight at the configured width.
pub fn calibrate_weights<F: Scalar>(
    model: &Model<F>,
    cfg: &QuantConfig,
) -> Result<BTreeMap<String, WeightQuant>> {
    cfg.validate()?;
    weight_names(model)
        .into_iter()
        .map(|n| {
            let q = weight_qparams(model.param(&n)?, cfg)?;
            Ok((n, q))
        })
        .collect()
}

/// Quantized copy of `model`: weights are fake-quantized on every forward,
/// and each activation-function output gets a range tracker that observes
/// during warm-up and quantizes once frozen.
pub fn wrap_model<F: Scalar>(model: &Model<F>, cfg: QuantConfig) -> Result<Model<F>> {
    cfg.validate()?;
    let mut sites = BTreeMap::new();
    for l in model.layers() {
        if let LayerKind::Act { .. } = l.kind {
            sites.insert(
                l.name.clone(),
                RangeTracker::new(cfg.ema_momentum, cfg.warmup_batches)?,
            );
        }
    }
    let mut q = model.clone();
    q.quant = Some(QuantState { config: cfg, sites });
    Ok(q)
}

/// Removes the fake-quantization state, restoring full-precision behavior.
pub fn unwrap_model<F: Scalar>(model: &Model<F>) -> Model<F> {
    let mut m = model.clone();
    m.quant = None;
    m
}

fn qp_json(qp: &QuantParams) -> Value {
    json!({
        "N": qp.bits,
        "alpha": qp.clip_lo,
        "beta": qp.clip_hi,
        "S": qp.scale,
        "Z": qp.zero_point,
        "granularity": qp.granularity,
    })
}

/// JSON map from quantized tensor to its parameters.
pub fn quant_report<F: Scalar>(model: &Model<F>) -> Result<Value> {
    let q = model
        .quant_state()
        .ok_or_else(|| Error::Config("model is not quantized".into()))?;
    let mut weights = Map::new();
    for (name, wq) in calibrate_weights(model, &q.config)? {
        let v = match wq {
            WeightQuant::PerTensor(qp) => qp_json(&qp),
            WeightQuant::PerChannel(qps) => Value::Array(qps.iter().map(qp_json).collect()),
        };
        weights.insert(name, v);
    }
    let mut acts = Map::new();
    for (name, site) in &q.sites {
        acts.insert(name.clone(), site.frozen().map_or(Value::Null, qp_json));
    }
    Ok(json!({
        "weight_bits": q.config.weight_bits,
        "act_bits": q.config.act_bits,
        "weights": weights,
        "activations": acts,
    }))
}
