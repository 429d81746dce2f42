use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::lrg::LraSpec;
use crate::tensor::{Conv2dCfg, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
}

/// One node of the layer graph. Sources are numbered with 0 for the model
/// input and `i + 1` for the output of layer `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        cfg: Conv2dCfg,
        bias: bool,
    },
    /// `index` is the layer's position `k` among all BN layers.
    BatchNorm {
        index: usize,
        eps: f64,
        momentum: f64,
    },
    Linear {
        out_features: usize,
        bias: bool,
    },
    Act {
        act: Activation,
    },
    Add {
        other: usize,
    },
    Upsample {
        factor: usize,
    },
    GlobalAvgPool,
    /// Per-sample target shape; the batch axis is kept.
    Reshape {
        shape: Vec<usize>,
    },
    Attention {
        spec: LraSpec,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub input: usize,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// Weight initialization scheme for conv and linear layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 2/fan_in)` weights, zero bias.
    KaimingNormal,
    /// `U(±1/√fan_in)` for weights and biases.
    FanInUniform,
}

/// Incrementally assembles a shape-checked layer graph with freshly
/// initialized parameters.
pub struct GraphBuilder<F: Scalar> {
    pub(crate) input_shape: Vec<usize>,
    pub(crate) layers: Vec<Layer>,
    pub(crate) params: BTreeMap<String, Tensor<F>>,
    pub(crate) buffers: BTreeMap<String, Tensor<F>>,
    shapes: Vec<Vec<usize>>,
    bn_count: usize,
    rng: ChaCha8Rng,
}

impl<F: Scalar> GraphBuilder<F> {
    /// `input_shape` excludes the batch axis.
    pub fn new(input_shape: &[usize], seed: u64) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            layers: Vec::new(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            shapes: vec![input_shape.to_vec()],
            bn_count: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Per-sample shape produced by `source`.
    pub fn shape_of(&self, source: usize) -> Result<&[usize]> {
        self.shapes
            .get(source)
            .map(Vec::as_slice)
            .ok_or_else(|| shape_err!("unknown source {source}"))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Registers a parameter that no layer consumes directly.
    pub fn add_param(&mut self, name: &str, tensor: Tensor<F>) -> Result<()> {
        if self.params.insert(name.to_string(), tensor).is_some() {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        Ok(())
    }

    fn push(
        &mut self,
        name: &str,
        input: usize,
        kind: LayerKind,
        out: Vec<usize>,
    ) -> Result<usize> {
        if self.layers.iter().any(|l| l.name == name) {
            return Err(Error::Config(format!("duplicate layer name {name}")));
        }
        self.layers.push(Layer {
            name: name.to_string(),
            input,
            kind,
        });
        self.shapes.push(out);
        Ok(self.shapes.len() - 1)
    }

    fn chw(&self, source: usize, what: &str) -> Result<[usize; 3]> {
        let s = self.shape_of(source)?;
        <[usize; 3]>::try_from(s).map_err(|_| shape_err!("{what} needs C×H×W input, got {s:?}"))
    }

    pub(crate) fn init_weight(&mut self, shape: &[usize], fan_in: usize, init: Init) -> Tensor<F> {
        match init {
            Init::KaimingNormal => {
                Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut self.rng)
            }
            Init::FanInUniform => {
                let b = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(shape, -b, b, &mut self.rng)
            }
        }
    }

    pub(crate) fn init_bias(&mut self, n: usize, fan_in: usize, init: Init) -> Tensor<F> {
        match init {
            Init::KaimingNormal => Tensor::zeros(&[n]),
            Init::FanInUniform => {
                let b = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(&[n], -b, b, &mut self.rng)
            }
        }
    }

    pub fn conv(
        &mut self,
        name: &str,
        input: usize,
        out_channels: usize,
        kernel: usize,
        cfg: Conv2dCfg,
        bias: bool,
        init: Init,
    ) -> Result<usize> {
        let [c, h, w] = self.chw(input, "conv")?;
        if cfg.groups == 0 || c % cfg.groups != 0 || !out_channels.is_multiple_of(cfg.groups) {
            return Err(shape_err!(
                "{name}: groups {} incompatible with {c}→{out_channels}",
                cfg.groups
            ));
        }
        if cfg.stride == 0 || cfg.dilation == 0 || kernel == 0 {
            return Err(Error::Config(format!(
                "{name}: stride, dilation and kernel must be ≥ 1"
            )));
        }
        let span = cfg.dilation * (kernel - 1) + 1;
        let extent = |n: usize| {
            (n + cfg.padding.begin + cfg.padding.end)
                .checked_sub(span)
                .map(|v| v / cfg.stride + 1)
        };
        let (oh, ow) = match (extent(h), extent(w)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Config(format!("{name}: non-positive output extent"))),
        };
        let cg = c / cfg.groups;
        let fan_in = cg * kernel * kernel;
        let wt = self.init_weight(&[out_channels, cg, kernel, kernel], fan_in, init);
        self.add_param(&format!("{name}.weight"), wt)?;
        if bias {
            let b = self.init_bias(out_channels, fan_in, init);
            self.add_param(&format!("{name}.bias"), b)?;
        }
        let kind = LayerKind::Conv {
            out_channels,
            kernel,
            cfg,
            bias,
        };
        self.push(name, input, kind, vec![out_channels, oh, ow])
    }

    pub fn batch_norm(&mut self, name: &str, input: usize) -> Result<usize> {
        let shape = self.shape_of(input)?.to_vec();
        let c = *shape
            .first()
            .ok_or_else(|| shape_err!("{name}: scalar input"))?;
        self.add_param(&format!("{name}.gamma"), Tensor::ones(&[c]))?;
        self.add_param(&format!("{name}.beta"), Tensor::zeros(&[c]))?;
        self.buffers
            .insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.buffers
            .insert(format!("{name}.running_var"), Tensor::ones(&[c]));
        let kind = LayerKind::BatchNorm {
            index: self.bn_count,
            eps: 1e-5,
            momentum: 0.1,
        };
        self.bn_count += 1;
        self.push(name, input, kind, shape)
    }

    /// PyTorch-default `U(±1/√fan_in)` initialization.
    pub fn linear(&mut self, name: &str, input: usize, out_features: usize) -> Result<usize> {
        let s = self.shape_of(input)?;
        let [d] = <[usize; 1]>::try_from(s)
            .map_err(|_| shape_err!("{name}: linear needs a flat input, got {s:?}"))?;
        let wt = self.init_weight(&[out_features, d], d, Init::FanInUniform);
        let b = self.init_bias(out_features, d, Init::FanInUniform);
        self.add_param(&format!("{name}.weight"), wt)?;
        self.add_param(&format!("{name}.bias"), b)?;
        let kind = LayerKind::Linear {
            out_features,
            bias: true,
        };
        self.push(name, input, kind, vec![out_features])
    }

    pub fn act(&mut self, name: &str, input: usize, act: Activation) -> Result<usize> {
        let shape = self.shape_of(input)?.to_vec();
        self.push(name, input, LayerKind::Act { act }, shape)
    }

    pub fn add(&mut self, name: &str, a: usize, b: usize) -> Result<usize> {
        let (sa, sb) = (self.shape_of(a)?.to_vec(), self.shape_of(b)?.to_vec());
        if sa != sb {
            return Err(shape_err!("{name}: cannot add {sa:?} and {sb:?}"));
        }
        self.push(name, a, LayerKind::Add { other: b }, sa)
    }

    pub fn upsample(&mut self, name: &str, input: usize, factor: usize) -> Result<usize> {
        if factor == 0 {
            return Err(Error::Config(format!(
                "{name}: upsample factor must be ≥ 1"
            )));
        }
        let [c, h, w] = self.chw(input, "upsample")?;
        self.push(
            name,
            input,
            LayerKind::Upsample { factor },
            vec![c, h * factor, w * factor],
        )
    }

    pub fn global_avg_pool(&mut self, name: &str, input: usize) -> Result<usize> {
        let [c, _, _] = self.chw(input, "pool")?;
        self.push(name, input, LayerKind::GlobalAvgPool, vec![c])
    }

    pub fn reshape(&mut self, name: &str, input: usize, shape: &[usize]) -> Result<usize> {
        let from = self.shape_of(input)?;
        if from.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(shape_err!("{name}: cannot reshape {from:?} to {shape:?}"));
        }
        self.push(
            name,
            input,
            LayerKind::Reshape {
                shape: shape.to_vec(),
            },
            shape.to_vec(),
        )
    }

    pub fn attention(&mut self, name: &str, input: usize, spec: LraSpec) -> Result<usize> {
        spec.validate()?;
        let [c, h, w] = self.chw(input, "attention")?;
        let init = Init::FanInUniform;
        let (lk, gk) = (spec.local_kernel(), spec.long_kernel());
        let t = self.init_weight(&[c, 1, lk, lk], lk * lk, init);
        self.add_param(&format!("{name}.local.weight"), t)?;
        let t = self.init_bias(c, lk * lk, init);
        self.add_param(&format!("{name}.local.bias"), t)?;
        let t = self.init_weight(&[c, 1, gk, gk], gk * gk, init);
        self.add_param(&format!("{name}.long.weight"), t)?;
        let t = self.init_bias(c, gk * gk, init);
        self.add_param(&format!("{name}.long.bias"), t)?;
        let hidden = spec.hidden(c)?;
        let t = self.init_weight(&[hidden, c, 1, 1], c, init);
        self.add_param(&format!("{name}.channel.weight"), t)?;
        let t = self.init_bias(hidden, c, init);
        self.add_param(&format!("{name}.channel.bias"), t)?;
        if spec.bottleneck > 1 {
            let t = self.init_weight(&[c, hidden, 1, 1], hidden, init);
            self.add_param(&format!("{name}.expand.weight"), t)?;
            let t = self.init_bias(c, hidden, init);
            self.add_param(&format!("{name}.expand.bias"), t)?;
        }
        self.push(name, input, LayerKind::Attention { spec }, vec![c, h, w])
    }

    pub fn num_sources(&self) -> usize {
        self.shapes.len()
    }
}
