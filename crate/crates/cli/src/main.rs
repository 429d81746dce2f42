//! `zsq`: stage-by-stage driver for zero-shot generative quantization.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use zsq_core::data::Dataset;
use zsq_core::lrg::{generate_batch, load_dump, write_dump, write_ppm_grid, Generator};
use zsq_core::nn::{load_checkpoint, save_checkpoint, Model};
use zsq_core::train::{
    evaluate, init_generator, load_datasets, pretrain_fp, probe_synthetic, quantize_with_warmup,
    run_ablation, run_data_generation, run_finetune, run_pipeline, save_log, stage_rng, Metrics,
    Stream, TrainConfig, PROBE_SAMPLES,
};
use zsq_core::{Error, Result};

/// Environment variable naming the default output directory.
const OUT_ENV: &str = "ZSQ_OUT";

const FP_CKPT: &str = "fp.ckpt";
const GEN_CKPT: &str = "generator.ckpt";
const QUANT_CKPT: &str = "quantized.ckpt";
const FT_CKPT: &str = "finetuned.ckpt";

#[derive(Parser)]
#[command(name = "zsq", version, about = "Zero-shot generative quantization")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Opts {
    /// JSON run configuration (defaults to the selected preset).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// CIFAR-10 binary directory for the cifar preset.
    #[arg(long, global = true)]
    cifar: Option<PathBuf>,
    /// Weight bit-width override.
    #[arg(long, global = true)]
    wbits: Option<u32>,
    /// Activation bit-width override.
    #[arg(long, global = true)]
    abits: Option<u32>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: $ZSQ_OUT, else ./runs].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Cifar,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision classifier and freeze its BN statistics.
    Pretrain,
    /// Train the generator against the frozen classifier.
    Generate {
        /// Also write this many synthetic images (raw dump plus a PPM preview).
        #[arg(long)]
        dump: Option<usize>,
    },
    /// Attach fake quantizers and calibrate activation ranges on synthetic data.
    Quantize,
    /// Fine-tune the quantized model on synthetic data and record the metrics.
    Finetune,
    /// Top-1 accuracy of a checkpoint.
    Eval {
        /// Checkpoint to evaluate [default: the fine-tuned model].
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Evaluate on a synthetic dump instead of the test split.
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// All stages in sequence.
    Pipeline,
    /// The eight component-ablation arms on one shared classifier.
    Ablate,
    /// Print the resolved configuration.
    Config,
}

fn resolve_config(o: &Opts) -> Result<TrainConfig> {
    let mut cfg =
        match (&o.config, o.preset) {
            (Some(path), _) => TrainConfig::from_json(&fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?)?,
            (None, Preset::Desk) => TrainConfig::desk(),
            (None, Preset::Cifar) => {
                let dir = o
                    .cifar
                    .clone()
                    .ok_or_else(|| Error::Config("the cifar preset needs --cifar <dir>".into()))?;
                TrainConfig::cifar(dir)
            }
        };
    if let Some(w) = o.wbits {
        cfg.quant.wbits = w;
    }
    if let Some(a) = o.abits {
        cfg.quant.abits = a;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(o: &Opts) -> PathBuf {
    o.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn require(dir: &Path, file: &str, producer: &str) -> Result<PathBuf> {
    let path = dir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            path,
            producer: format!("zsq {producer}"),
        })
    }
}

fn load_generator(dir: &Path) -> Result<Generator<f32>> {
    Generator::from_model(load_checkpoint(&require(dir, GEN_CKPT, "generate")?)?)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

struct Run {
    cfg: TrainConfig,
    dir: PathBuf,
}

impl Run {
    fn new(o: &Opts) -> Result<Self> {
        let cfg = resolve_config(o)?;
        let dir = out_dir(o);
        fs::create_dir_all(dir.join("logs"))?;
        fs::write(dir.join("config.json"), cfg.canonical_json() + "\n")?;
        Ok(Self { cfg, dir })
    }

    fn test_set(&self) -> Result<Dataset> {
        Ok(load_datasets(&self.cfg)?.1)
    }

    fn teacher(&self) -> Result<Model<f32>> {
        load_checkpoint(&require(&self.dir, FP_CKPT, "pretrain")?)
    }

    fn record(&self, name: &str, v: Value) -> Result<Value> {
        write_json(&self.dir.join(format!("{name}.json")), &v)?;
        Ok(v)
    }

    fn pretrain(&self) -> Result<Value> {
        let (train, test) = load_datasets(&self.cfg)?;
        let pre = pretrain_fp(&self.cfg, &train, &test)?;
        save_checkpoint(&pre.model, &self.dir.join(FP_CKPT))?;
        save_log(&self.dir.join("logs"), "pretrain", &pre.log)?;
        self.record(
            "pretrain",
            json!({ "fp_top1": pre.fp_top1, "config_hash": self.cfg.hash() }),
        )
    }

    fn generate(&self, dump: Option<usize>) -> Result<Value> {
        let teacher = self.teacher()?;
        let mut gen = init_generator(&self.cfg)?;
        let log = run_data_generation(&self.cfg, &teacher, &mut gen)?;
        save_checkpoint(&gen.model, &self.dir.join(GEN_CKPT))?;
        save_log(&self.dir.join("logs"), "generation", &log)?;
        let last = log.last().map(|r| (r.bns, r.ama)).unwrap_or_default();
        let mut v = json!({
            "steps": log.len(),
            "final_bns": last.0,
            "final_ama": last.1,
            "config_hash": self.cfg.hash(),
        });
        if let Some(n) = dump.filter(|&n| n > 0) {
            let mut rng = stage_rng(self.cfg.seed, Stream::Dump);
            let (images, labels) = generate_batch(&gen, n, self.cfg.gen.label_policy, &mut rng)?;
            let dir = self.dir.join("synthetic");
            write_dump(&dir, &images, &labels)?;
            let cols = (n as f64).sqrt().ceil() as usize;
            write_ppm_grid(&self.dir.join("synthetic.ppm"), &images, cols)?;
            v["dump"] = json!(dir);
        }
        self.record("generate", v)
    }

    fn quantize(&self) -> Result<Value> {
        let teacher = self.teacher()?;
        let gen = load_generator(&self.dir)?;
        let mq = quantize_with_warmup(&self.cfg, &teacher, &gen)?;
        save_checkpoint(&mq, &self.dir.join(QUANT_CKPT))?;
        let top1 = evaluate(&mq, &self.test_set()?, self.cfg.eval_batch)?;
        self.record(
            "quantize",
            json!({
                "q_top1_prefinetune": top1,
                "wbits": self.cfg.quant.wbits,
                "abits": self.cfg.quant.abits,
                "config_hash": self.cfg.hash(),
            }),
        )
    }

    fn finetune(&self) -> Result<Value> {
        let teacher = self.teacher()?;
        let gen = load_generator(&self.dir)?;
        let mut mq = load_checkpoint(&require(&self.dir, QUANT_CKPT, "quantize")?)?;
        let test = self.test_set()?;
        let b = self.cfg.eval_batch;
        let fp_top1 = evaluate(&teacher, &test, b)?;
        let q_top1_prefinetune = evaluate(&mq, &test, b)?;
        let log = run_finetune(&self.cfg, &mut mq, &teacher, &gen)?;
        save_checkpoint(&mq, &self.dir.join(FT_CKPT))?;
        save_log(&self.dir.join("logs"), "finetune", &log)?;
        let metrics = Metrics {
            fp_top1,
            q_top1_prefinetune,
            q_top1_postfinetune: evaluate(&mq, &test, b)?,
            wbits: self.cfg.quant.wbits,
            abits: self.cfg.quant.abits,
            seeds: [("run".to_string(), self.cfg.seed)].into(),
            ablation: self.cfg.ablation,
            synthetic: probe_synthetic(&self.cfg, &teacher, &gen, PROBE_SAMPLES)?,
            config_hash: self.cfg.hash(),
        };
        self.record("metrics", serde_json::to_value(&metrics)?)
    }

    fn eval(&self, ckpt: Option<PathBuf>, synthetic: Option<PathBuf>) -> Result<Value> {
        let path = match ckpt {
            Some(p) if p.is_file() => p,
            Some(p) => {
                return Err(Error::MissingArtifact {
                    producer: producer_of(&p).into(),
                    path: p,
                })
            }
            None => require(&self.dir, FT_CKPT, "finetune")?,
        };
        let model = load_checkpoint(&path)?;
        let data = match &synthetic {
            Some(dir) => {
                let (images, labels) = load_dump(dir)?;
                Dataset::new(images, labels, self.cfg.data.num_classes())?
            }
            None => self.test_set()?,
        };
        let top1 = evaluate(&model, &data, self.cfg.eval_batch)?;
        Ok(json!({
            "checkpoint": path,
            "data": if synthetic.is_some() { "synthetic" } else { "test" },
            "top1": top1,
            "config_hash": self.cfg.hash(),
        }))
    }

    fn pipeline(&self) -> Result<Value> {
        let (pre, out) = run_pipeline(&self.cfg)?;
        save_checkpoint(&pre.model, &self.dir.join(FP_CKPT))?;
        save_checkpoint(&out.generator.model, &self.dir.join(GEN_CKPT))?;
        save_checkpoint(&out.quantized, &self.dir.join(FT_CKPT))?;
        let logs = self.dir.join("logs");
        save_log(&logs, "pretrain", &pre.log)?;
        save_log(&logs, "generation", &out.gen_log)?;
        save_log(&logs, "finetune", &out.ft_log)?;
        self.record("metrics", serde_json::to_value(&out.metrics)?)
    }

    fn ablate(&self) -> Result<(Value, String)> {
        let rows = run_ablation(&self.cfg)?;
        let table = ablation_table(&rows);
        fs::write(self.dir.join("ablation.txt"), &table)?;
        let v = self.record("ablation", serde_json::to_value(&rows)?)?;
        Ok((v, table))
    }
}

/// The command whose output a checkpoint file name refers to.
fn producer_of(path: &Path) -> &'static str {
    match path.file_name().and_then(|n| n.to_str()) {
        Some(FP_CKPT) => "zsq pretrain",
        Some(GEN_CKPT) => "zsq generate",
        Some(QUANT_CKPT) => "zsq quantize",
        _ => "zsq finetune",
    }
}

fn ablation_table(rows: &[Metrics]) -> String {
    let on = |b: bool| if b { "on" } else { "off" };
    let header = ["LRG", "AMA", "DKD", "FP top-1", "W/A", "pre-FT", "post-FT"];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|m| {
            [
                on(m.ablation.lrg).to_string(),
                on(m.ablation.ama).to_string(),
                on(m.ablation.dkd).to_string(),
                format!("{:.2}", 100.0 * m.fp_top1),
                format!("W{}A{}", m.wbits, m.abits),
                format!("{:.2}", 100.0 * m.q_top1_prefinetune),
                format!("{:.2}", 100.0 * m.q_top1_postfinetune),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i < 3 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out += &line(rule.iter().map(String::as_str).collect());
    for r in &body {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Config = cli.command {
        println!("{}", resolve_config(&cli.opts)?.canonical_json());
        return Ok(());
    }
    let run = Run::new(&cli.opts)?;
    let value = match cli.command {
        Command::Pretrain => run.pretrain()?,
        Command::Generate { dump } => run.generate(dump)?,
        Command::Quantize => run.quantize()?,
        Command::Finetune => run.finetune()?,
        Command::Eval { ckpt, synthetic } => run.eval(ckpt, synthetic)?,
        Command::Pipeline => run.pipeline()?,
        Command::Ablate => {
            let (_, table) = run.ablate()?;
            print!("{table}");
            return Ok(());
        }
        Command::Config => unreachable!(),
    };
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
