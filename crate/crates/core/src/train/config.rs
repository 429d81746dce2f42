use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamConfig, SgdConfig, StepSchedule};
use crate::data::ToyBlobs;
use crate::error::{Error, Result};
use crate::losses::{AmaConfig, CenterMode, DkdConfig};
use crate::lrg::{Gate, GeneratorSpec, LabelPolicy, LraSpec};
use crate::nn::{ResnetDepth, ResnetSpec};
use crate::quant::{DequantMode, QuantConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    ToyBlobs {
        train: ToyBlobs,
        test_per_class: usize,
    },
    Cifar10 {
        path: PathBuf,
    },
}

impl DataConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            DataConfig::ToyBlobs { train, .. } => train.num_classes,
            DataConfig::Cifar10 { .. } => 10,
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            DataConfig::ToyBlobs { train, .. } => train.image_size,
            DataConfig::Cifar10 { .. } => 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: ResnetDepth,
    pub width_mult: f64,
}

/// Full-precision training recipe (SGD with momentum). The learning rate
/// drops tenfold at half and at three quarters of the epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl PretrainConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = [self.epochs / 2, self.epochs * 3 / 4]
            .iter()
            .filter(|&&m| m > 0 && epoch >= m)
            .count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub base_channels: usize,
    /// Upsampling blocks that carry attention when the attention arm is on.
    pub lra_positions: Vec<usize>,
    #[serde(default = "one")]
    pub bottleneck: usize,
    #[serde(default)]
    pub gate: Gate,
}

fn one() -> usize {
    1
}

/// Data-generation loop (Adam on the generator).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenLoopConfig {
    pub lr: f64,
    pub adam: AdamConfig,
    pub decay: f64,
    pub decay_every: usize,
    pub batch: usize,
    pub steps: usize,
    pub label_policy: LabelPolicy,
    /// Weight of a cross-entropy term tying generated images to their
    /// conditioning labels through the teacher. Zero reproduces `BNS + AMA`.
    #[serde(default)]
    pub ce_weight: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtBnMode {
    /// Normalize with the pretrained running statistics.
    #[default]
    Frozen,
    /// Normalize with batch statistics (running buffers untouched).
    Batch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// The generator's conditioning labels `y`.
    #[default]
    Conditioning,
    /// The teacher's argmax on each synthetic image.
    Teacher,
}

/// Quantized fine-tuning loop (SGD with Nesterov momentum).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub decay: f64,
    pub decay_every: usize,
    pub batch: usize,
    pub steps_per_epoch: usize,
    #[serde(default)]
    pub bn_mode: FtBnMode,
    #[serde(default)]
    pub labels: LabelSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSection {
    pub wbits: u32,
    pub abits: u32,
    #[serde(default)]
    pub per_channel: bool,
    #[serde(default)]
    pub dequant: DequantMode,
    pub ema_momentum: f64,
    pub warmup_batches: usize,
}

/// Component switches of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub lrg: bool,
    pub ama: bool,
    pub dkd: bool,
}

impl Ablation {
    pub const ALL_ON: Self = Self {
        lrg: true,
        ama: true,
        dkd: true,
    };
    pub const ALL_OFF: Self = Self {
        lrg: false,
        ama: false,
        dkd: false,
    };

    /// All eight combinations, all-off first.
    pub fn grid() -> [Self; 8] {
        std::array::from_fn(|i| Self {
            lrg: i & 4 != 0,
            ama: i & 2 != 0,
            dkd: i & 1 != 0,
        })
    }

    pub fn tag(&self) -> String {
        let f = |b: bool| if b { "on" } else { "off" };
        format!(
            "lrg-{}_ama-{}_dkd-{}",
            f(self.lrg),
            f(self.ama),
            f(self.dkd)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub kernel: usize,
    pub dilation: usize,
    pub margin: f64,
    pub lambda: f64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub dkd_alpha: f64,
    pub dkd_beta: f64,
    pub temperature: f64,
    pub center_mode: CenterMode,
}

/// Multipliers applied to the loop lengths and batch sizes; step counts and
/// decay periods scale together so the number of decays is preserved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub gen_steps: f64,
    pub ft_epochs: f64,
    pub batch: f64,
}

impl Scale {
    pub fn unit() -> Self {
        Self {
            gen_steps: 1.0,
            ft_epochs: 1.0,
            batch: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub generator: GeneratorConfig,
    pub gen: GenLoopConfig,
    pub ft: FinetuneConfig,
    pub quant: QuantSection,
    pub ablation: Ablation,
    pub hyper: Hyper,
    pub scale: Scale,
    pub eval_batch: usize,
}

fn scaled(v: usize, s: f64) -> usize {
    ((v as f64 * s).round() as usize).max(1)
}

impl TrainConfig {
    /// Published CIFAR-10 / ResNet-20 settings. Generator-loop length and
    /// the fine-tuning steps per epoch are not published and are set here.
    pub fn cifar(cifar_dir: PathBuf) -> Self {
        Self {
            seed: 0,
            data: DataConfig::Cifar10 { path: cifar_dir },
            model: ModelConfig {
                depth: ResnetDepth::Resnet20,
                width_mult: 1.0,
            },
            pretrain: PretrainConfig {
                epochs: 160,
                batch: 128,
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            generator: GeneratorConfig {
                noise_dim: 100,
                base_channels: 128,
                lra_positions: vec![0, 1],
                bottleneck: 1,
                gate: Gate::Raw,
            },
            gen: GenLoopConfig {
                lr: 0.5,
                adam: AdamConfig::default(),
                decay: 0.1,
                decay_every: 1000,
                batch: 256,
                steps: 4000,
                label_policy: LabelPolicy::Uniform,
                ce_weight: 0.0,
            },
            ft: FinetuneConfig {
                lr: 1e-4,
                momentum: 0.9,
                weight_decay: 1e-4,
                epochs: 150,
                decay: 0.1,
                decay_every: 100,
                batch: 256,
                steps_per_epoch: 200,
                bn_mode: FtBnMode::Frozen,
                labels: LabelSource::Teacher,
            },
            quant: QuantSection {
                wbits: 4,
                abits: 4,
                per_channel: false,
                dequant: DequantMode::OffsetCorrected,
                ema_momentum: 0.9,
                warmup_batches: 20,
            },
            ablation: Ablation::ALL_ON,
            hyper: Hyper {
                kernel: 21,
                dilation: 3,
                margin: 0.6,
                lambda: 0.9,
                lambda_lo: 0.75,
                lambda_hi: 0.95,
                dkd_alpha: 1.0,
                dkd_beta: 8.0,
                temperature: 1.0,
                center_mode: CenterMode::Batch,
            },
            scale: Scale::unit(),
            eval_batch: 500,
        }
    }

    /// Laptop-sized run on the toy blobs with ResNet-8.
    pub fn desk() -> Self {
        let mut c = Self::cifar(PathBuf::new());
        c.data = DataConfig::ToyBlobs {
            train: ToyBlobs {
                color_jitter: 0.02,
                ..ToyBlobs::new(20, 60, 16)
            },
            test_per_class: 40,
        };
        c.model = ModelConfig {
            depth: ResnetDepth::Resnet8,
            width_mult: 0.25,
        };
        c.pretrain = PretrainConfig {
            epochs: 10,
            batch: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        };
        c.generator.noise_dim = 32;
        c.generator.base_channels = 32;
        c.gen.lr = 1e-2;
        c.gen.batch = 32;
        c.ft.batch = 32;
        c.ft.steps_per_epoch = 8;
        c.scale = Scale {
            gen_steps: 0.1,
            ft_epochs: 0.1,
            batch: 1.0,
        };
        c.eval_batch = 256;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |what: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be positive, got {v}")))
            }
        };
        pos("pretrain.lr", self.pretrain.lr)?;
        pos("model.width_mult", self.model.width_mult)?;
        pos("scale.gen_steps", self.scale.gen_steps)?;
        pos("scale.ft_epochs", self.scale.ft_epochs)?;
        pos("scale.batch", self.scale.batch)?;
        self.gen_schedule().validate()?;
        self.ft_schedule().validate()?;
        self.quant_config().validate()?;
        self.ama_config().validate()?;
        self.dkd_config().validate()?;
        self.lra_spec()?;
        if !(self.hyper.lambda >= 0.0) {
            return Err(Error::Config("hyper.lambda must be ≥ 0".into()));
        }
        if !(self.gen.ce_weight >= 0.0) {
            return Err(Error::Config("gen.ce_weight must be ≥ 0".into()));
        }
        for (what, v) in [
            ("pretrain.batch", self.pretrain.batch),
            ("gen.batch", self.gen.batch),
            ("ft.batch", self.ft.batch),
            ("ft.steps_per_epoch", self.ft.steps_per_epoch),
            ("eval_batch", self.eval_batch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{what} must be ≥ 1")));
            }
        }
        if self.gen_batch() < 2 || self.ft_batch() < 2 {
            return Err(Error::Config(
                "batch-norm statistics need batches of at least 2".into(),
            ));
        }
        self.generator_spec().validate()
    }

    pub fn gen_steps(&self) -> usize {
        scaled(self.gen.steps, self.scale.gen_steps)
    }

    pub fn gen_batch(&self) -> usize {
        scaled(self.gen.batch, self.scale.batch)
    }

    pub fn gen_schedule(&self) -> StepSchedule {
        StepSchedule {
            lr: self.gen.lr,
            gamma: self.gen.decay,
            period: scaled(self.gen.decay_every, self.scale.gen_steps),
        }
    }

    pub fn ft_epochs(&self) -> usize {
        scaled(self.ft.epochs, self.scale.ft_epochs)
    }

    pub fn ft_batch(&self) -> usize {
        scaled(self.ft.batch, self.scale.batch)
    }

    /// Per-epoch schedule for fine-tuning.
    pub fn ft_schedule(&self) -> StepSchedule {
        StepSchedule {
            lr: self.ft.lr,
            gamma: self.ft.decay,
            period: scaled(self.ft.decay_every, self.scale.ft_epochs),
        }
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.ft.momentum,
            weight_decay: self.ft.weight_decay,
            nesterov: true,
        }
    }

    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            weight_bits: self.quant.wbits,
            act_bits: self.quant.abits,
            per_channel: self.quant.per_channel,
            dequant: self.quant.dequant,
            ema_momentum: self.quant.ema_momentum,
            warmup_batches: self.quant.warmup_batches,
        }
    }

    pub fn ama_config(&self) -> AmaConfig {
        AmaConfig {
            margin: self.hyper.margin,
            lambda_lo: self.hyper.lambda_lo,
            lambda_hi: self.hyper.lambda_hi,
            center_mode: self.hyper.center_mode,
        }
    }

    pub fn dkd_config(&self) -> DkdConfig {
        DkdConfig {
            alpha: self.hyper.dkd_alpha,
            beta: self.hyper.dkd_beta,
            temperature: self.hyper.temperature,
        }
    }

    /// λ in effect: zero when distillation is switched off.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.dkd {
            self.hyper.lambda
        } else {
            0.0
        }
    }

    pub fn lra_spec(&self) -> Result<LraSpec> {
        let spec = LraSpec {
            kernel: self.hyper.kernel,
            dilation: self.hyper.dilation,
            bottleneck: self.generator.bottleneck,
            gate: self.generator.gate,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn resnet_spec(&self) -> ResnetSpec {
        ResnetSpec::new(
            self.model.depth,
            self.data.num_classes(),
            self.model.width_mult,
        )
        .with_image_size(self.data.image_size())
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        let mut g = GeneratorSpec::new(
            self.generator.noise_dim,
            self.data.num_classes(),
            self.generator.base_channels,
            self.data.image_size(),
        );
        g.lra = LraSpec {
            kernel: self.hyper.kernel,
            dilation: self.hyper.dilation,
            bottleneck: self.generator.bottleneck,
            gate: self.generator.gate,
        };
        g.lra_positions = if self.ablation.lrg {
            self.generator.lra_positions.clone()
        } else {
            Vec::new()
        };
        g
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Key-sorted compact JSON.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
