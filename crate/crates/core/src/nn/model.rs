use std::collections::BTreeMap;

use super::bn_store::{BnLayerStats, BnStore};
use super::graph::{Activation, GraphBuilder, Layer, LayerKind};
use super::Architecture;
use crate::error::{shape_err, Error, Result};
use crate::lrg::{lra_forward, LraWeights};
use crate::quant::{
    fake_quantize, fake_quantize_per_channel, weight_qparams, QuantState, WeightQuant,
};
use crate::tensor::{BnMode, Gradients, Scalar, Tape, Tensor, Var};

/// A layer graph with its parameters, BN buffers and, once quantized, the
/// fake-quantization state.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar = f32> {
    pub(crate) arch: Architecture,
    pub(crate) input_shape: Vec<usize>,
    pub(crate) layers: Vec<Layer>,
    pub(crate) feature_source: Option<usize>,
    pub(crate) params: BTreeMap<String, Tensor<F>>,
    pub(crate) buffers: BTreeMap<String, Tensor<F>>,
    pub(crate) bn_updates: u64,
    pub(crate) bn_store: Option<BnStore>,
    pub(crate) quant: Option<QuantState>,
}

/// Options for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub bn: BnMode,
    pub capture: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            bn: BnMode::Eval,
            capture: false,
        }
    }

    pub fn train() -> Self {
        Self {
            bn: BnMode::Train,
            capture: false,
        }
    }

    /// Batch-statistics normalization with the capture recorded.
    pub fn capture() -> Self {
        Self {
            bn: BnMode::Train,
            capture: true,
        }
    }
}

/// Batch statistics observed at BN layer `k`.
#[derive(Clone, Debug)]
pub struct BnBatchStats<'t, F: Scalar> {
    pub layer: String,
    pub mean: Var<'t, F>,
    /// Biased variance.
    pub var: Var<'t, F>,
    pub eps: f64,
    pub(crate) count: usize,
    pub(crate) momentum: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardCapture<'t, F: Scalar> {
    pub bn_stats: Vec<BnBatchStats<'t, F>>,
    /// Penultimate (post-pool) features, when the graph defines a tap.
    pub features: Option<Var<'t, F>>,
}

pub struct ForwardOutput<'t, F: Scalar> {
    pub output: Var<'t, F>,
    pub capture: Option<ForwardCapture<'t, F>>,
    batch_stats: Vec<BnBatchStats<'t, F>>,
    observations: Vec<(String, f64, f64)>,
}

impl<'t, F: Scalar> ForwardOutput<'t, F> {
    /// Per-site activation ranges seen by trackers that are still warming up.
    pub fn observations(&self) -> &[(String, f64, f64)] {
        &self.observations
    }
}

/// Parameters recorded on a tape for one forward/backward pass.
pub struct Bound<'t, F: Scalar> {
    vars: BTreeMap<String, Var<'t, F>>,
}

impl<'t, F: Scalar> Bound<'t, F> {
    pub fn get(&self, name: &str) -> Result<Var<'t, F>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, F>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient of every bound parameter, zero-filled where untouched.
    pub fn grads(&self, g: &Gradients<F>) -> BTreeMap<String, Vec<F>> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), g.get_or_zeros(v)))
            .collect()
    }
}

impl<F: Scalar> Model<F> {
    pub(crate) fn from_builder(
        b: GraphBuilder<F>,
        arch: Architecture,
        feature_source: Option<usize>,
    ) -> Self {
        Self {
            arch,
            input_shape: b.input_shape,
            layers: b.layers,
            feature_source,
            params: b.params,
            buffers: b.buffers,
            bn_updates: 0,
            bn_store: None,
            quant: None,
        }
    }

    /// Builds a model directly from a graph, for hand-assembled networks.
    pub fn from_graph(builder: GraphBuilder<F>, feature_source: Option<usize>) -> Result<Self> {
        if let Some(s) = feature_source {
            builder.shape_of(s)?;
        }
        Ok(Self::from_builder(
            builder,
            Architecture::Custom,
            feature_source,
        ))
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<F>> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn feature_source(&self) -> Option<usize> {
        self.feature_source
    }

    /// Names of the BN layers in index order.
    pub fn bn_layers(&self) -> Vec<&Layer> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
            .collect()
    }

    /// Width of the feature tap.
    pub fn feature_dim(&self) -> Option<usize> {
        let s = self.feature_source?;
        self.source_shape(s).ok().map(|v| v.iter().product())
    }

    fn source_shape(&self, source: usize) -> Result<Vec<usize>> {
        let mut shapes = vec![self.input_shape.clone()];
        for l in &self.layers {
            let s = layer_out_shape(l, &shapes)?;
            shapes.push(s);
        }
        shapes
            .get(source)
            .cloned()
            .ok_or_else(|| shape_err!("unknown source {source}"))
    }

    /// Records parameters on `tape`; only `trainable` bindings get gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> Bound<'t, F> {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    if trainable {
                        tape.param(t)
                    } else {
                        tape.constant(t)
                    },
                )
            })
            .collect();
        Bound { vars }
    }

    fn weight<'t>(&self, bound: &Bound<'t, F>, name: &str) -> Result<Var<'t, F>> {
        let v = bound.get(name)?;
        let Some(q) = &self.quant else { return Ok(v) };
        match weight_qparams(self.param(name)?, &q.config)? {
            WeightQuant::PerTensor(qp) => fake_quantize(v, &qp),
            WeightQuant::PerChannel(qps) => fake_quantize_per_channel(v, &qps),
        }
    }

    /// Runs the graph on `input` (N × input_shape).
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t, F>,
        input: Var<'t, F>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<'t, F>> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(shape_err!(
                "input {shape:?} does not match N×{:?}",
                self.input_shape
            ));
        }
        let n = shape[0];
        let mut values: Vec<Var<'t, F>> = Vec::with_capacity(self.layers.len() + 1);
        values.push(input);
        let mut batch_stats = Vec::new();
        let mut observations = Vec::new();
        for layer in &self.layers {
            let x = values[layer.input];
            let name = &layer.name;
            let y = match &layer.kind {
                LayerKind::Conv { cfg, bias, .. } => {
                    let w = self.weight(bound, &format!("{name}.weight"))?;
                    let b = if *bias {
                        Some(bound.get(&format!("{name}.bias"))?)
                    } else {
                        None
                    };
                    x.conv2d(w, b, *cfg)?
                }
                LayerKind::Linear { bias, .. } => {
                    let w = self.weight(bound, &format!("{name}.weight"))?;
                    let b = if *bias {
                        Some(bound.get(&format!("{name}.bias"))?)
                    } else {
                        None
                    };
                    x.linear(w, b)?
                }
                LayerKind::BatchNorm { eps, momentum, .. } => {
                    let gamma = bound.get(&format!("{name}.gamma"))?;
                    let beta = bound.get(&format!("{name}.beta"))?;
                    let e = F::of(*eps);
                    match opts.bn {
                        BnMode::Train => {
                            let mean = x.channel_mean()?;
                            let var = x.channel_var(mean)?;
                            let c = mean.numel();
                            batch_stats.push(BnBatchStats {
                                layer: name.clone(),
                                mean,
                                var,
                                eps: *eps,
                                count: x.numel() / c,
                                momentum: *momentum,
                            });
                            x.bn_apply(mean, var, gamma, beta, e)?
                        }
                        BnMode::Eval => {
                            let tape = input.tape;
                            let mean = tape.constant(self.buffer(&format!("{name}.running_mean"))?);
                            let var = tape.constant(self.buffer(&format!("{name}.running_var"))?);
                            x.bn_apply(mean, var, gamma, beta, e)?
                        }
                    }
                }
                LayerKind::Act { act } => {
                    let y = apply_activation(x, *act);
                    match self.quant.as_ref().and_then(|q| q.sites.get(name)) {
                        Some(site) => match site.frozen() {
                            Some(qp) => fake_quantize(y, qp)?,
                            None => {
                                let v = y.to_vec();
                                let lo = v.iter().fold(f64::INFINITY, |m, e| m.min(e.to_f64c()));
                                let hi =
                                    v.iter().fold(f64::NEG_INFINITY, |m, e| m.max(e.to_f64c()));
                                observations.push((name.clone(), lo, hi));
                                y
                            }
                        },
                        None => y,
                    }
                }
                LayerKind::Add { other } => x.add(values[*other])?,
                LayerKind::Upsample { factor } => x.upsample_nearest(*factor)?,
                LayerKind::GlobalAvgPool => x.global_avg_pool()?,
                LayerKind::Reshape { shape } => {
                    let mut full = vec![n];
                    full.extend_from_slice(shape);
                    x.reshape(&full)?
                }
                LayerKind::Attention { spec } => {
                    let pair = |part: &str| -> Result<(Var<'t, F>, Var<'t, F>)> {
                        Ok((
                            self.weight(bound, &format!("{name}.{part}.weight"))?,
                            bound.get(&format!("{name}.{part}.bias"))?,
                        ))
                    };
                    let mut channel = vec![pair("channel")?];
                    if spec.bottleneck > 1 {
                        channel.push(pair("expand")?);
                    }
                    let w = LraWeights {
                        local: pair("local")?,
                        long: pair("long")?,
                        channel,
                    };
                    lra_forward(x, spec, &w)?
                }
            };
            values.push(y);
        }
        let output = *values.last().expect("input is always present");
        let capture = opts.capture.then(|| ForwardCapture {
            bn_stats: batch_stats.clone(),
            features: self.feature_source.map(|s| values[s]),
        });
        Ok(ForwardOutput {
            output,
            capture,
            batch_stats,
            observations,
        })
    }

    /// Convenience wrapper: eval-mode outputs for a whole tensor, chunked
    /// into batches of at most `batch` samples.
    pub fn predict(&self, images: &Tensor<F>, batch: usize) -> Result<Tensor<F>> {
        let n = images.shape()[0];
        let batch = batch.max(1);
        let mut out = Vec::new();
        let mut width = 0;
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let chunk = images.slice_outer(start, end)?;
            let tape = Tape::new();
            let bound = self.bind(&tape, false);
            let y = self
                .forward(&bound, tape.constant(&chunk), ForwardOptions::eval())?
                .output;
            let s = y.shape();
            width = s[1..].iter().product();
            out.extend(y.to_vec());
            start = end;
        }
        let mut shape = vec![n];
        shape.push(width);
        Tensor::new(&shape, out)
    }

    fn buffer(&self, name: &str) -> Result<&Tensor<F>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("no buffer named {name}")))
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// buffers: `r ← (1 − m)·r + m·batch`, with the unbiased variance.
    pub fn update_running_stats(&mut self, out: &ForwardOutput<'_, F>) -> Result<()> {
        if out.batch_stats.is_empty() {
            return Err(Error::Config("forward recorded no batch statistics".into()));
        }
        for s in &out.batch_stats {
            let m = F::of(s.momentum);
            let one = F::one();
            let unbias = if s.count > 1 {
                F::of(s.count as f64 / (s.count as f64 - 1.0))
            } else {
                one
            };
            let mean = s.mean.to_vec();
            let var = s.var.to_vec();
            let rm = self
                .buffers
                .get_mut(&format!("{}.running_mean", s.layer))
                .ok_or_else(|| Error::Config(format!("no running mean for {}", s.layer)))?;
            for (r, b) in rm.data_mut().iter_mut().zip(&mean) {
                *r = (one - m) * *r + m * *b;
            }
            let rv = self
                .buffers
                .get_mut(&format!("{}.running_var", s.layer))
                .ok_or_else(|| Error::Config(format!("no running var for {}", s.layer)))?;
            for (r, b) in rv.data_mut().iter_mut().zip(&var) {
                *r = (one - m) * *r + m * *b * unbias;
            }
        }
        self.bn_updates += 1;
        Ok(())
    }

    /// Copies the running statistics into the frozen store. Repeating the
    /// call is allowed only while the statistics are unchanged.
    pub fn pretrain_snapshot(&mut self) -> Result<&BnStore> {
        if self.bn_updates == 0 {
            return Err(Error::Degenerate(
                "running statistics were never updated; train the model first".into(),
            ));
        }
        let mut layers = Vec::new();
        for l in &self.layers {
            if let LayerKind::BatchNorm { eps, .. } = l.kind {
                let get = |suffix: &str| -> Result<Vec<f64>> {
                    Ok(self
                        .buffer(&format!("{}.{suffix}", l.name))?
                        .data()
                        .iter()
                        .map(|v| v.to_f64c())
                        .collect())
                };
                layers.push(BnLayerStats {
                    layer: l.name.clone(),
                    mean: get("running_mean")?,
                    var: get("running_var")?,
                    eps,
                });
            }
        }
        let store = BnStore::new(layers)?;
        if let Some(existing) = &self.bn_store {
            if *existing != store {
                return Err(Error::Frozen(
                    "BN statistics store is already frozen".into(),
                ));
            }
        } else {
            self.bn_store = Some(store);
        }
        Ok(self.bn_store.as_ref().expect("just set"))
    }

    pub fn bn_store(&self) -> Option<&BnStore> {
        self.bn_store.as_ref()
    }

    /// Installs a store on a model that has none (used when loading).
    pub fn set_bn_store(&mut self, store: BnStore) -> Result<()> {
        if self.bn_store.is_some() {
            return Err(Error::Frozen(
                "BN statistics store is already frozen".into(),
            ));
        }
        self.bn_store = Some(store);
        Ok(())
    }

    /// Independent deep copy that keeps the frozen statistics.
    pub fn clone_for_quantization(&self) -> Result<Self> {
        if self.bn_store.is_none() {
            return Err(Error::Degenerate(
                "model has no frozen BN statistics; pretrain first".into(),
            ));
        }
        Ok(self.clone())
    }

    pub fn quant_state(&self) -> Option<&QuantState> {
        self.quant.as_ref()
    }

    /// Feeds warm-up observations to the range trackers and freezes every
    /// site that has seen enough batches. Returns the number still warming.
    pub fn observe_activations(&mut self, out: &ForwardOutput<'_, F>) -> Result<usize> {
        let Some(q) = self.quant.as_mut() else {
            return Ok(0);
        };
        let (bits, dequant) = (q.config.act_bits, q.config.dequant);
        for (name, lo, hi) in &out.observations {
            let site = q
                .sites
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("no activation site {name}")))?;
            site.observe(*lo, *hi)?;
            if site.warmup_done() {
                site.freeze(bits, dequant)?;
            }
        }
        Ok(q.sites.values().filter(|s| s.frozen().is_none()).count())
    }

    /// Bit-exact copy of the parameters, as raw values.
    pub fn snapshot_params(&self) -> BTreeMap<String, Vec<F>> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.data().to_vec()))
            .collect()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        let conv = |m: &BTreeMap<String, Tensor<F>>| {
            m.iter().map(|(k, v)| (k.clone(), v.cast::<G>())).collect()
        };
        Model {
            arch: self.arch.clone(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            feature_source: self.feature_source,
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            bn_updates: self.bn_updates,
            bn_store: self.bn_store.clone(),
            quant: self.quant.clone(),
        }
    }
}

fn apply_activation<'t, F: Scalar>(x: Var<'t, F>, act: Activation) -> Var<'t, F> {
    match act {
        Activation::Relu => x.relu(),
        Activation::LeakyRelu { slope } => x.leaky_relu(F::of(slope)),
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => x.sigmoid(),
    }
}

/// Per-sample output shape of `l` given the shapes of all earlier sources.
pub(crate) fn layer_out_shape(l: &Layer, shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
    let x = shapes
        .get(l.input)
        .ok_or_else(|| shape_err!("{}: unknown source {}", l.name, l.input))?;
    Ok(match &l.kind {
        LayerKind::Conv {
            out_channels,
            kernel,
            cfg,
            ..
        } => {
            let span = cfg.dilation * (kernel - 1) + 1;
            let ext = |n: usize| {
                (n + cfg.padding.begin + cfg.padding.end)
                    .checked_sub(span)
                    .map(|v| v / cfg.stride + 1)
                    .ok_or_else(|| Error::Config(format!("{}: non-positive output extent", l.name)))
            };
            if x.len() != 3 {
                return Err(shape_err!("{}: conv needs C×H×W, got {x:?}", l.name));
            }
            vec![*out_channels, ext(x[1])?, ext(x[2])?]
        }
        LayerKind::Linear { out_features, .. } => vec![*out_features],
        LayerKind::GlobalAvgPool => vec![x[0]],
        LayerKind::Upsample { factor } => vec![x[0], x[1] * factor, x[2] * factor],
        LayerKind::Reshape { shape } => shape.clone(),
        LayerKind::BatchNorm { .. }
        | LayerKind::Act { .. }
        | LayerKind::Add { .. }
        | LayerKind::Attention { .. } => x.clone(),
    })
}
