use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::attention::LraSpec;
use crate::error::{Error, Result};
use crate::nn::{Activation, Architecture, Bound, ForwardOptions, GraphBuilder, Init, Model};
use crate::tensor::{Conv2dCfg, Scalar, Tape, Tensor, Var};

/// Conditional generator: `[noise ‖ embed(y)] → linear → reshape → BN`,
/// then two `upsample×2 → conv3×3 → BN → LeakyReLU` blocks, each optionally
/// followed by an attention block, then `conv3×3 → tanh`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub base_channels: usize,
    pub image_size: usize,
    pub out_channels: usize,
    /// Indices (0 or 1) of the upsampling blocks that carry attention.
    pub lra_positions: Vec<usize>,
    pub lra: LraSpec,
    pub leaky_slope: f64,
}

pub const NUM_BLOCKS: usize = 2;

impl GeneratorSpec {
    pub fn new(
        noise_dim: usize,
        num_classes: usize,
        base_channels: usize,
        image_size: usize,
    ) -> Self {
        Self {
            noise_dim,
            num_classes,
            embed_dim: noise_dim,
            base_channels,
            image_size,
            out_channels: 3,
            lra_positions: (0..NUM_BLOCKS).collect(),
            lra: LraSpec {
                kernel: 21,
                dilation: 3,
                bottleneck: 1,
                gate: Default::default(),
            },
            leaky_slope: 0.2,
        }
    }

    /// The baseline generator with no attention blocks.
    pub fn without_attention(mut self) -> Self {
        self.lra_positions.clear();
        self
    }

    /// Side of the seed map; two ×2 upsamplings bring it to the image size.
    pub fn seed_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn block_channels(&self) -> [usize; NUM_BLOCKS] {
        [self.base_channels, (self.base_channels / 2).max(1)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2
            || self.noise_dim == 0
            || self.base_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::Config(
                "generator needs ≥ 2 classes and positive widths".into(),
            ));
        }
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if let Some(p) = self.lra_positions.iter().find(|&&p| p >= NUM_BLOCKS) {
            return Err(Error::Config(format!(
                "attention position {p} beyond {NUM_BLOCKS} blocks"
            )));
        }
        self.lra.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    /// Each label drawn independently and uniformly.
    #[default]
    Uniform,
    /// Every class appears `⌊B/C⌋` times; leftovers go to distinct random classes.
    Balanced,
}

#[derive(Clone, Debug)]
pub struct Generator<F: Scalar = f32> {
    pub spec: GeneratorSpec,
    pub model: Model<F>,
}

pub fn build_generator<F: Scalar>(spec: &GeneratorSpec, seed: u64) -> Result<Generator<F>> {
    spec.validate()?;
    let input_dim = spec.noise_dim + spec.embed_dim;
    let mut b = GraphBuilder::<F>::new(&[input_dim], seed);
    let table = Tensor::randn(&[spec.num_classes, spec.embed_dim], 1.0, b.rng());
    b.add_param("embed.weight", table)?;
    let s = spec.seed_size();
    let base = spec.base_channels;
    let x = b.linear("seed.fc", 0, base * s * s)?;
    let x = b.reshape("seed.reshape", x, &[base, s, s])?;
    let mut x = b.batch_norm("seed.bn", x)?;
    let init = Init::FanInUniform;
    for (i, &ch) in spec.block_channels().iter().enumerate() {
        let p = format!("block{i}");
        x = b.upsample(&format!("{p}.up"), x, 2)?;
        x = b.conv(
            &format!("{p}.conv"),
            x,
            ch,
            3,
            Conv2dCfg::new(1, 1),
            true,
            init,
        )?;
        x = b.batch_norm(&format!("{p}.bn"), x)?;
        x = b.act(
            &format!("{p}.act"),
            x,
            Activation::LeakyRelu {
                slope: spec.leaky_slope,
            },
        )?;
        if spec.lra_positions.contains(&i) {
            x = b.attention(&format!("{p}.lra"), x, spec.lra)?;
        }
    }
    let x = b.conv(
        "out.conv",
        x,
        spec.out_channels,
        3,
        Conv2dCfg::new(1, 1),
        true,
        init,
    )?;
    b.act("out.tanh", x, Activation::Tanh)?;
    Ok(Generator {
        spec: spec.clone(),
        model: Model::from_builder(b, Architecture::Generator(spec.clone()), None),
    })
}

impl<F: Scalar> Generator<F> {
    /// Images for `noise` (B × noise_dim) conditioned on `labels`. The
    /// generator's BN layers always normalize with batch statistics.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t, F>,
        noise: Var<'t, F>,
        labels: &[usize],
    ) -> Result<Var<'t, F>> {
        let s = noise.shape();
        if s.len() != 2 || s[1] != self.spec.noise_dim || s[0] != labels.len() {
            return Err(Error::Shape(format!(
                "noise {s:?} with {} labels for noise_dim {}",
                labels.len(),
                self.spec.noise_dim
            )));
        }
        if s[0] < 2 {
            return Err(Error::Degenerate(
                "generator batch-norm needs at least 2 samples".into(),
            ));
        }
        let embed = bound.get("embed.weight")?.gather_rows(labels)?;
        let input = noise.concat_cols(embed)?;
        Ok(self
            .model
            .forward(bound, input, ForwardOptions::train())?
            .output)
    }

    pub fn from_model(model: Model<F>) -> Result<Self> {
        match model.architecture() {
            Architecture::Generator(spec) => Ok(Self {
                spec: spec.clone(),
                model,
            }),
            _ => Err(Error::Format("checkpoint does not hold a generator".into())),
        }
    }
}

/// Draws conditioning labels under `policy`.
pub fn sample_labels<R: Rng + ?Sized>(
    batch: usize,
    num_classes: usize,
    policy: LabelPolicy,
    rng: &mut R,
) -> Result<Vec<usize>> {
    match policy {
        LabelPolicy::Uniform => Ok((0..batch)
            .map(|_| rng.random_range(0..num_classes))
            .collect()),
        LabelPolicy::Balanced => {
            if batch < num_classes {
                return Err(Error::Config(format!(
                    "balanced labels need batch ≥ {num_classes}, got {batch}"
                )));
            }
            let mut labels: Vec<usize> = (0..batch - batch % num_classes)
                .map(|i| i % num_classes)
                .collect();
            let mut extra: Vec<usize> = (0..num_classes).collect();
            extra.shuffle(rng);
            labels.extend(extra.into_iter().take(batch % num_classes));
            Ok(labels)
        }
    }
}

/// Standard-normal noise of shape `batch × dim`.
pub fn sample_noise<F: Scalar, R: Rng + ?Sized>(
    batch: usize,
    dim: usize,
    rng: &mut R,
) -> Tensor<F> {
    Tensor::from_fn(&[batch, dim], |_| {
        F::of(rng.sample::<f64, _>(StandardNormal))
    })
}

/// One synthetic batch `(Ī, y)` without recording gradients.
pub fn generate_batch<F: Scalar, R: Rng + ?Sized>(
    gen: &Generator<F>,
    batch: usize,
    policy: LabelPolicy,
    rng: &mut R,
) -> Result<(Tensor<F>, Vec<usize>)> {
    let labels = sample_labels(batch, gen.spec.num_classes, policy, rng)?;
    let noise = sample_noise::<F, _>(batch, gen.spec.noise_dim, rng);
    let tape = Tape::new();
    let bound = gen.model.bind(&tape, false);
    let images = gen.forward(&bound, tape.constant(&noise), &labels)?.value();
    images.ensure_finite("generated images")?;
    Ok((images, labels))
}
