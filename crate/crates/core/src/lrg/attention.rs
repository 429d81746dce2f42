use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Conv2dCfg, Padding, Scalar, Var};

/// How the attention map multiplies the input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    /// `Ṽ = LA ⊙ V` with the convolution output used directly.
    #[default]
    Raw,
    /// `Ṽ = σ(LA) ⊙ V`.
    Sigmoid,
}

/// Decomposition of a `K×K` convolution into a local depthwise conv, a
/// dilated depthwise conv and a pointwise channel conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LraSpec {
    pub kernel: usize,
    pub dilation: usize,
    /// Hidden width of the channel conv is `channels / bottleneck`; 1 keeps a
    /// single square 1×1 conv.
    #[serde(default = "one")]
    pub bottleneck: usize,
    #[serde(default)]
    pub gate: Gate,
}

fn one() -> usize {
    1
}

impl LraSpec {
    pub fn new(kernel: usize, dilation: usize) -> Result<Self> {
        let spec = Self {
            kernel,
            dilation,
            bottleneck: 1,
            gate: Gate::Raw,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.dilation == 0 || self.bottleneck == 0 {
            return Err(Error::Config(format!(
                "attention needs K, d, bottleneck ≥ 1 (got {}, {}, {})",
                self.kernel, self.dilation, self.bottleneck
            )));
        }
        Ok(())
    }

    /// `2d − 1`.
    pub fn local_kernel(&self) -> usize {
        2 * self.dilation - 1
    }

    /// `⌈K/d⌉`.
    pub fn long_kernel(&self) -> usize {
        self.kernel.div_ceil(self.dilation)
    }

    /// Side of the combined footprint of the two spatial convs.
    pub fn receptive_field(&self) -> usize {
        self.local_kernel() + (self.long_kernel() - 1) * self.dilation
    }

    pub fn hidden(&self, channels: usize) -> Result<usize> {
        if self.bottleneck == 1 {
            return Ok(channels);
        }
        if !channels.is_multiple_of(self.bottleneck) {
            return Err(Error::Config(format!(
                "bottleneck {} does not divide {channels} channels",
                self.bottleneck
            )));
        }
        Ok(channels / self.bottleneck)
    }

    pub fn local_cfg(&self, channels: usize) -> Conv2dCfg {
        Conv2dCfg {
            padding: Padding::same(self.dilation - 1),
            groups: channels,
            ..Conv2dCfg::default()
        }
    }

    pub fn long_cfg(&self, channels: usize) -> Conv2dCfg {
        Conv2dCfg {
            padding: Padding::preserving(self.long_kernel(), self.dilation),
            dilation: self.dilation,
            groups: channels,
            ..Conv2dCfg::default()
        }
    }

    /// Trainable parameters (weights and biases) of the block.
    pub fn param_count(&self, channels: usize) -> Result<usize> {
        let c = channels;
        let spatial = c * self.local_kernel().pow(2) + c + c * self.long_kernel().pow(2) + c;
        let channel = if self.bottleneck == 1 {
            c * c + c
        } else {
            let h = self.hidden(c)?;
            c * h + h + h * c + c
        };
        Ok(spatial + channel)
    }

    /// Parameters of the dense `K×K` convolution being approximated.
    pub fn dense_param_count(&self, channels: usize) -> usize {
        channels * channels * self.kernel * self.kernel + channels
    }
}

/// Bound parameters of one attention block.
pub struct LraWeights<'t, F: Scalar> {
    pub local: (Var<'t, F>, Var<'t, F>),
    pub long: (Var<'t, F>, Var<'t, F>),
    /// One `(weight, bias)` pair, or two with a bottleneck.
    pub channel: Vec<(Var<'t, F>, Var<'t, F>)>,
}

/// `LA = C(SLR(SL(V)))`, returns `LA ⊙ V` (or `σ(LA) ⊙ V`).
pub fn lra_forward<'t, F: Scalar>(
    v: Var<'t, F>,
    spec: &LraSpec,
    w: &LraWeights<'t, F>,
) -> Result<Var<'t, F>> {
    let la = lra_map(v, spec, w)?;
    let la = match spec.gate {
        Gate::Raw => la,
        Gate::Sigmoid => la.sigmoid(),
    };
    la.mul(v)
}

/// The attention map `LA` before gating.
pub fn lra_map<'t, F: Scalar>(
    v: Var<'t, F>,
    spec: &LraSpec,
    w: &LraWeights<'t, F>,
) -> Result<Var<'t, F>> {
    let shape = v.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "attention needs NCHW input, got {shape:?}"
        )));
    }
    let c = shape[1];
    let local = v.conv2d(w.local.0, Some(w.local.1), spec.local_cfg(c))?;
    let mut la = local.conv2d(w.long.0, Some(w.long.1), spec.long_cfg(c))?;
    for &(cw, cb) in &w.channel {
        la = la.conv2d(cw, Some(cb), Conv2dCfg::default())?;
    }
    Ok(la)
}
