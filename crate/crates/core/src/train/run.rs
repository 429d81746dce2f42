use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Ablation, DataConfig, FtBnMode, LabelSource, TrainConfig};
use super::optim::{Adam, Sgd, SgdConfig};
use crate::data::{load_cifar10_binary, make_toy_blobs, Dataset, Split, ToyBlobs};
use crate::error::{Error, Result};
use crate::losses::{
    class_centers, cross_entropy, finetune_loss, generation_loss, BnsTarget, CenterMode,
    CenterTracker,
};
use crate::lrg::{build_generator, generate_batch, sample_labels, sample_noise, Generator};
use crate::nn::{build_resnet, ForwardOptions, Model};
use crate::quant::wrap_model;
use crate::tensor::{BnMode, Tape, Tensor};

/// Independent random streams, one per stage, all derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    TrainData = 1,
    TestData = 2,
    ClassifierInit = 3,
    Pretrain = 4,
    GeneratorInit = 5,
    Generation = 6,
    Warmup = 7,
    Finetune = 8,
    Probe = 9,
    Dump = 10,
}

pub fn stage_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn stage_seed(seed: u64, stream: Stream) -> u64 {
    stage_rng(seed, stream).next_u64()
}

/// One line of a JSON-lines training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L_BNS")]
    pub bns: f64,
    #[serde(rename = "L_AMA")]
    pub ama: f64,
    #[serde(rename = "L_CE")]
    pub ce: f64,
    #[serde(rename = "L_TCKD")]
    pub tckd: f64,
    #[serde(rename = "L_NCKD")]
    pub nckd: f64,
    pub total: f64,
}

pub fn write_jsonl(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn finite(v: f64, what: &str, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} is {v} at step {step}")))
    }
}

pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataConfig::ToyBlobs {
            train,
            test_per_class,
        } => {
            let test = ToyBlobs {
                per_class: *test_per_class,
                ..train.clone()
            };
            Ok((
                make_toy_blobs(train, stage_seed(cfg.seed, Stream::TrainData))?,
                make_toy_blobs(&test, stage_seed(cfg.seed, Stream::TestData))?,
            ))
        }
        DataConfig::Cifar10 { path } => Ok((
            load_cifar10_binary(path, Split::Train)?,
            load_cifar10_binary(path, Split::Test)?,
        )),
    }
}

/// Top-1 accuracy of eval-mode predictions; ties go to the lowest class index.
pub fn evaluate(model: &Model<f32>, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Degenerate(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let logits = model.predict(&data.images, batch)?;
    logits.ensure_finite("logits")?;
    let pred = logits.argmax_rows()?;
    let hits = pred
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

pub struct Pretrained {
    pub model: Model<f32>,
    pub fp_top1: f64,
    pub log: Vec<StepRecord>,
}

/// Cross-entropy training of a fresh classifier followed by the frozen BN
/// snapshot.
pub fn pretrain_fp(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<Pretrained> {
    let mut model = build_resnet::<f32>(
        &cfg.resnet_spec(),
        stage_seed(cfg.seed, Stream::ClassifierInit),
    )?;
    if train.image_shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "dataset images {:?} do not fit the classifier input {:?}",
            train.image_shape(),
            model.input_shape()
        )));
    }
    let p = &cfg.pretrain;
    let mut rng = stage_rng(cfg.seed, Stream::Pretrain);
    let mut opt = Sgd::new(SgdConfig {
        momentum: p.momentum,
        weight_decay: p.weight_decay,
        nesterov: false,
    });
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..p.epochs {
        let lr = p.lr_at_epoch(epoch);
        for idx in train.shuffled_batches(p.batch, &mut rng) {
            if idx.len() < 2 {
                continue;
            }
            let batch = train.subset(&idx)?;
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let out = model.forward(
                &bound,
                tape.constant(&batch.images),
                ForwardOptions::train(),
            )?;
            let loss = cross_entropy(out.output, &batch.labels)?;
            let ce = finite(loss.item() as f64, "pretraining loss", step)?;
            let grads = bound.grads(&tape.backward(loss)?);
            opt.step(model.params_mut(), &grads, lr)?;
            model.update_running_stats(&out)?;
            log.push(StepRecord {
                step,
                lr,
                ce,
                total: ce,
                ..StepRecord::default()
            });
            step += 1;
        }
        if let Some(r) = log.last() {
            log::info!("pretrain epoch {}/{}: ce {:.4}", epoch + 1, p.epochs, r.ce);
        }
    }
    model.pretrain_snapshot()?;
    let fp_top1 = evaluate(&model, test, cfg.eval_batch)?;
    Ok(Pretrained {
        model,
        fp_top1,
        log,
    })
}

pub fn init_generator(cfg: &TrainConfig) -> Result<Generator<f32>> {
    build_generator(
        &cfg.generator_spec(),
        stage_seed(cfg.seed, Stream::GeneratorInit),
    )
}

fn teacher_fingerprint(
    teacher: &Model<f32>,
) -> (BTreeMap<String, Vec<f32>>, BTreeMap<String, Tensor<f32>>) {
    (teacher.snapshot_params(), teacher.buffers().clone())
}

fn check_frozen(
    teacher: &Model<f32>,
    before: &(BTreeMap<String, Vec<f32>>, BTreeMap<String, Tensor<f32>>),
    store: &crate::nn::BnStore,
) -> Result<()> {
    let after = teacher_fingerprint(teacher);
    let same_params = before.0.iter().zip(&after.0).all(|((ka, a), (kb, b))| {
        ka == kb && a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    if !same_params || before.1 != after.1 || teacher.bn_store() != Some(store) {
        return Err(Error::Frozen(
            "the full-precision teacher changed during training".into(),
        ));
    }
    Ok(())
}

/// Trains the generator against the frozen teacher with `L_BNS + L_AMA`
/// (the AMA term only when enabled).
pub fn run_data_generation(
    cfg: &TrainConfig,
    teacher: &Model<f32>,
    gen: &mut Generator<f32>,
) -> Result<Vec<StepRecord>> {
    let store = teacher
        .bn_store()
        .ok_or_else(|| {
            Error::Degenerate("teacher has no frozen BN statistics; pretrain first".into())
        })?
        .clone();
    let before = teacher_fingerprint(teacher);
    let target = BnsTarget::from_store(&store);
    let ama_cfg = cfg.ama_config();
    let schedule = cfg.gen_schedule();
    let batch = cfg.gen_batch();
    let k = gen.spec.num_classes;
    let mut rng = stage_rng(cfg.seed, Stream::Generation);
    let mut adam = Adam::new(cfg.gen.adam);
    let mut tracker = CenterTracker::default();
    let mut log = Vec::with_capacity(cfg.gen_steps());
    for step in 0..cfg.gen_steps() {
        let lr = schedule.at(step);
        let labels = sample_labels(batch, k, cfg.gen.label_policy, &mut rng)?;
        let noise = sample_noise::<f32, _>(batch, gen.spec.noise_dim, &mut rng);
        let tape = Tape::new();
        let gb = gen.model.bind(&tape, true);
        let tb = teacher.bind(&tape, false);
        let images = gen.forward(&gb, tape.constant(&noise), &labels)?;
        let out = teacher.forward(&tb, images, ForwardOptions::capture())?;
        let capture = out.capture.as_ref().expect("capture requested");
        let ama = if cfg.ablation.ama {
            let features = capture
                .features
                .ok_or_else(|| Error::Config("teacher exposes no feature layer".into()))?;
            let centers = class_centers(features, &labels)?;
            let per = match cfg.hyper.center_mode {
                CenterMode::Batch => centers.per_sample(&labels)?,
                CenterMode::Ema { decay } => {
                    tracker.update(&centers, decay);
                    tracker.per_sample(&tape, &labels)?
                }
            };
            Some((features, per, &ama_cfg))
        } else {
            None
        };
        let terms = generation_loss(&capture.bn_stats, &target, ama)?;
        let mut total = terms.total;
        let mut ce = 0.0;
        if cfg.gen.ce_weight > 0.0 {
            let c = cross_entropy(out.output, &labels)?;
            ce = c.item() as f64;
            total = total.add(c.scale(cfg.gen.ce_weight as f32))?;
        }
        let rec = StepRecord {
            step,
            lr,
            bns: terms.bns.item() as f64,
            ama: terms.ama.map_or(0.0, |a| a.item() as f64),
            ce,
            total: finite(total.item() as f64, "generation loss", step)?,
            ..StepRecord::default()
        };
        let grads = gb.grads(&tape.backward(total)?);
        adam.step(gen.model.params_mut(), &grads, lr)?;
        if step % 100 == 0 {
            log::info!(
                "generation step {step}: bns {:.4} ama {:.4}",
                rec.bns,
                rec.ama
            );
        }
        log.push(rec);
    }
    check_frozen(teacher, &before, &store)?;
    Ok(log)
}

fn ft_forward_opts(cfg: &TrainConfig) -> ForwardOptions {
    ForwardOptions {
        bn: match cfg.ft.bn_mode {
            FtBnMode::Frozen => BnMode::Eval,
            FtBnMode::Batch => BnMode::Train,
        },
        capture: false,
    }
}

/// Copies the teacher, attaches fake quantizers and calibrates the
/// activation ranges on synthetic batches until every site is frozen.
pub fn quantize_with_warmup(
    cfg: &TrainConfig,
    teacher: &Model<f32>,
    gen: &Generator<f32>,
) -> Result<Model<f32>> {
    let mut mq = wrap_model(&teacher.clone_for_quantization()?, cfg.quant_config())?;
    let mut rng = stage_rng(cfg.seed, Stream::Warmup);
    let opts = ft_forward_opts(cfg);
    let mut warming = usize::MAX;
    let mut batches = 0;
    while warming > 0 {
        if batches > cfg.quant.warmup_batches {
            return Err(Error::Degenerate(format!(
                "{warming} activation sites still unfrozen after {batches} warm-up batches"
            )));
        }
        let (images, _) = generate_batch(gen, cfg.ft_batch(), cfg.gen.label_policy, &mut rng)?;
        let tape = Tape::new();
        let bound = mq.bind(&tape, false);
        let out = mq.forward(&bound, tape.constant(&images), opts)?;
        warming = mq.observe_activations(&out)?;
        batches += 1;
    }
    Ok(mq)
}

/// Fine-tunes the quantized model on freshly generated batches with
/// `L_CE + λ·L_DKD`.
pub fn run_finetune(
    cfg: &TrainConfig,
    mq: &mut Model<f32>,
    teacher: &Model<f32>,
    gen: &Generator<f32>,
) -> Result<Vec<StepRecord>> {
    if !mq.quant_state().is_some_and(|q| q.all_frozen()) {
        return Err(Error::Config(
            "quantized model needs frozen activation ranges; run the warm-up first".into(),
        ));
    }
    let store = teacher
        .bn_store()
        .ok_or_else(|| Error::Degenerate("teacher has no frozen BN statistics".into()))?
        .clone();
    let before = teacher_fingerprint(teacher);
    let lambda = cfg.effective_lambda();
    let dkd = cfg.dkd_config();
    let schedule = cfg.ft_schedule();
    let opts = ft_forward_opts(cfg);
    let mut sgd = Sgd::new(cfg.sgd_config());
    let mut rng = stage_rng(cfg.seed, Stream::Finetune);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.ft_epochs() {
        let lr = schedule.at(epoch);
        for _ in 0..cfg.ft.steps_per_epoch {
            let (images, cond) =
                generate_batch(gen, cfg.ft_batch(), cfg.gen.label_policy, &mut rng)?;
            let t_logits = teacher.predict(&images, images.shape()[0])?;
            let labels = match cfg.ft.labels {
                LabelSource::Conditioning => cond,
                LabelSource::Teacher => t_logits.argmax_rows()?,
            };
            let tape = Tape::new();
            let bound = mq.bind(&tape, true);
            let out = mq.forward(&bound, tape.constant(&images), opts)?;
            let terms = finetune_loss(out.output, Some(&t_logits), &labels, lambda, &dkd)?;
            let (tckd, nckd) = terms
                .dkd
                .as_ref()
                .map_or((0.0, 0.0), |d| (d.tckd.item() as f64, d.nckd.item() as f64));
            let rec = StepRecord {
                step,
                lr,
                ce: terms.ce.item() as f64,
                tckd,
                nckd,
                total: finite(terms.total.item() as f64, "fine-tuning loss", step)?,
                ..StepRecord::default()
            };
            let grads = bound.grads(&tape.backward(terms.total)?);
            sgd.step(mq.params_mut(), &grads, lr)?;
            log.push(rec);
            step += 1;
        }
        if let Some(r) = log.last() {
            log::info!("finetune epoch {}: total {:.4}", epoch + 1, r.total);
        }
    }
    check_frozen(teacher, &before, &store)?;
    Ok(log)
}

/// Statistics of teacher features on a fixed synthetic probe batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProbe {
    /// Mean pairwise cosine distance between features of samples sharing a
    /// conditioning label, averaged over classes.
    pub dispersion: f64,
    /// Fraction of samples whose teacher argmax equals the conditioning label.
    pub label_agreement: f64,
}

pub fn probe_synthetic(
    cfg: &TrainConfig,
    teacher: &Model<f32>,
    gen: &Generator<f32>,
    samples: usize,
) -> Result<SyntheticProbe> {
    let mut rng = stage_rng(cfg.seed, Stream::Probe);
    let (images, labels) = generate_batch(gen, samples.max(2), cfg.gen.label_policy, &mut rng)?;
    let tape = Tape::new();
    let bound = teacher.bind(&tape, false);
    let out = teacher.forward(
        &bound,
        tape.constant(&images),
        ForwardOptions {
            bn: BnMode::Eval,
            capture: true,
        },
    )?;
    let pred = out.output.value().argmax_rows()?;
    let agree = pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    let f = out
        .capture
        .and_then(|c| c.features)
        .ok_or_else(|| Error::Config("teacher exposes no feature layer".into()))?;
    let d = f.shape()[1];
    let rows: Vec<Vec<f64>> = f
        .to_vec()
        .chunks(d)
        .map(|r| {
            let n = r
                .iter()
                .map(|&x| (x as f64).powi(2))
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            r.iter().map(|&x| x as f64 / n).collect()
        })
        .collect();
    let mut per_class = Vec::new();
    for c in 0..gen.spec.num_classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                let cos: f64 = rows[i].iter().zip(&rows[j]).map(|(x, y)| x * y).sum();
                sum += 1.0 - cos;
                pairs += 1;
            }
        }
        if pairs > 0 {
            per_class.push(sum / pairs as f64);
        }
    }
    if per_class.is_empty() {
        return Err(Error::Degenerate(
            "no class has two synthetic samples".into(),
        ));
    }
    Ok(SyntheticProbe {
        dispersion: per_class.iter().sum::<f64>() / per_class.len() as f64,
        label_agreement: agree as f64 / labels.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fp_top1: f64,
    pub q_top1_prefinetune: f64,
    pub q_top1_postfinetune: f64,
    pub wbits: u32,
    pub abits: u32,
    pub seeds: BTreeMap<String, u64>,
    pub ablation: Ablation,
    pub synthetic: SyntheticProbe,
    pub config_hash: String,
}

pub struct RunOutcome {
    pub metrics: Metrics,
    pub generator: Generator<f32>,
    pub quantized: Model<f32>,
    pub gen_log: Vec<StepRecord>,
    pub ft_log: Vec<StepRecord>,
}

/// Synthetic samples drawn for [`probe_synthetic`] in the recorded metrics.
pub const PROBE_SAMPLES: usize = 96;

/// Generation, warm-up and fine-tuning on top of an existing teacher.
pub fn run_after_pretrain(
    cfg: &TrainConfig,
    pre: &Pretrained,
    test: &Dataset,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let teacher = &pre.model;
    let mut generator = init_generator(cfg)?;
    let gen_log = run_data_generation(cfg, teacher, &mut generator)?;
    let synthetic = probe_synthetic(cfg, teacher, &generator, PROBE_SAMPLES)?;
    let mut quantized = quantize_with_warmup(cfg, teacher, &generator)?;
    let q_top1_prefinetune = evaluate(&quantized, test, cfg.eval_batch)?;
    let ft_log = run_finetune(cfg, &mut quantized, teacher, &generator)?;
    let q_top1_postfinetune = evaluate(&quantized, test, cfg.eval_batch)?;
    let metrics = Metrics {
        fp_top1: pre.fp_top1,
        q_top1_prefinetune,
        q_top1_postfinetune,
        wbits: cfg.quant.wbits,
        abits: cfg.quant.abits,
        seeds: BTreeMap::from([("run".to_string(), cfg.seed)]),
        ablation: cfg.ablation,
        synthetic,
        config_hash: cfg.hash(),
    };
    Ok(RunOutcome {
        metrics,
        generator,
        quantized,
        gen_log,
        ft_log,
    })
}

/// The whole pipeline from data loading to the final metrics.
pub fn run_pipeline(cfg: &TrainConfig) -> Result<(Pretrained, RunOutcome)> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    let pre = pretrain_fp(cfg, &train, &test)?;
    let out = run_after_pretrain(cfg, &pre, &test)?;
    Ok((pre, out))
}

/// All eight ablation arms for one seed, sharing a single pretrained teacher.
pub fn run_ablation(cfg: &TrainConfig) -> Result<Vec<Metrics>> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    let pre = pretrain_fp(cfg, &train, &test)?;
    Ablation::grid()
        .into_iter()
        .map(|arm| {
            let arm_cfg = TrainConfig {
                ablation: arm,
                ..cfg.clone()
            };
            run_after_pretrain(&arm_cfg, &pre, &test).map(|o| o.metrics)
        })
        .collect()
}

/// Writes `records` to `dir/name.jsonl`, creating `dir` if needed.
pub fn save_log(dir: &Path, name: &str, records: &[StepRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(format!("{name}.jsonl")), records)
}
