use serde::{Deserialize, Serialize};

use super::graph::{Activation, GraphBuilder, Init};
use super::model::Model;
use super::Architecture;
use crate::error::{Error, Result};
use crate::tensor::{Conv2dCfg, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResnetDepth {
    /// Three stages of one basic block each.
    Resnet8,
    /// Three stages of three basic blocks each.
    Resnet20,
}

impl ResnetDepth {
    pub fn blocks_per_stage(self) -> usize {
        match self {
            ResnetDepth::Resnet8 => 1,
            ResnetDepth::Resnet20 => 3,
        }
    }
}

impl std::str::FromStr for ResnetDepth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet8" => Ok(ResnetDepth::Resnet8),
            "resnet20" => Ok(ResnetDepth::Resnet20),
            _ => Err(Error::Config(format!(
                "unknown depth {s}; expected resnet8 or resnet20"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResnetSpec {
    pub depth: ResnetDepth,
    pub num_classes: usize,
    pub width_mult: f64,
    pub image_size: usize,
    #[serde(default = "three")]
    pub in_channels: usize,
}

fn three() -> usize {
    3
}

impl ResnetSpec {
    pub fn new(depth: ResnetDepth, num_classes: usize, width_mult: f64) -> Self {
        Self {
            depth,
            num_classes,
            width_mult,
            image_size: 32,
            in_channels: 3,
        }
    }

    pub fn with_image_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    /// Stage widths `16, 32, 64` scaled by the width multiplier.
    pub fn widths(&self) -> [usize; 3] {
        [16, 32, 64].map(|w| ((w as f64 * self.width_mult).round() as usize).max(1))
    }
}

/// CIFAR-style residual network: 3×3 stem, three stages of basic blocks
/// (the last two downsample by 2 and use 1×1 projection shortcuts), global
/// average pooling and a linear head. Every conv is followed by BN. The
/// feature tap is the pooled vector.
pub fn build_resnet<F: Scalar>(spec: &ResnetSpec, seed: u64) -> Result<Model<F>> {
    if spec.num_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    if !(spec.width_mult > 0.0 && spec.width_mult.is_finite()) {
        return Err(Error::Config(format!(
            "width multiplier {} must be positive",
            spec.width_mult
        )));
    }
    if spec.image_size < 4 {
        return Err(Error::Config(format!(
            "image size {} too small",
            spec.image_size
        )));
    }
    let widths = spec.widths();
    let mut b = GraphBuilder::<F>::new(&[spec.in_channels, spec.image_size, spec.image_size], seed);
    let init = Init::KaimingNormal;
    let conv3 = |stride| Conv2dCfg::new(stride, 1);

    let x = b.conv("stem.conv", 0, widths[0], 3, conv3(1), false, init)?;
    let x = b.batch_norm("stem.bn", x)?;
    let mut x = b.act("stem.relu", x, Activation::Relu)?;
    let mut channels = widths[0];
    for (s, &w) in widths.iter().enumerate() {
        for k in 0..spec.depth.blocks_per_stage() {
            let stride = if s > 0 && k == 0 { 2 } else { 1 };
            let p = format!("stage{}.block{k}", s + 1);
            let h = b.conv(&format!("{p}.conv1"), x, w, 3, conv3(stride), false, init)?;
            let h = b.batch_norm(&format!("{p}.bn1"), h)?;
            let h = b.act(&format!("{p}.relu1"), h, Activation::Relu)?;
            let h = b.conv(&format!("{p}.conv2"), h, w, 3, conv3(1), false, init)?;
            let h = b.batch_norm(&format!("{p}.bn2"), h)?;
            let shortcut = if stride != 1 || channels != w {
                let sc = b.conv(
                    &format!("{p}.shortcut.conv"),
                    x,
                    w,
                    1,
                    Conv2dCfg::new(stride, 0),
                    false,
                    init,
                )?;
                b.batch_norm(&format!("{p}.shortcut.bn"), sc)?
            } else {
                x
            };
            let sum = b.add(&format!("{p}.add"), h, shortcut)?;
            x = b.act(&format!("{p}.relu2"), sum, Activation::Relu)?;
            channels = w;
        }
    }
    let pooled = b.global_avg_pool("pool", x)?;
    b.linear("fc", pooled, spec.num_classes)?;
    Ok(Model::from_builder(
        b,
        Architecture::Resnet(spec.clone()),
        Some(pooled),
    ))
}
