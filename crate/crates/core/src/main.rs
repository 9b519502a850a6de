use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use mca_core::augment::AugmentStrategy;
use mca_core::checkpoint::Checkpoint;
use mca_core::config::{TrainConfig, Variant};
use mca_core::dataset::{self, Dataset};
use mca_core::gradcheck;
use mca_core::pnm;
use mca_core::synth::{SceneKind, SceneSpec};
use mca_core::tensor::Tensor;
use mca_core::trainer::{self, log_csv, Trainer};

/// Adaptor training on frozen vision transformers for hard-scene segmentation.
#[derive(Parser)]
#[command(name = "mca", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenData),
    /// Train one configuration; writes checkpoint.mcaf and train_log.csv.
    Train(Train),
    /// Score a checkpoint on a dataset split; writes the metrics CSV.
    Eval(Eval),
    /// Run the 64-bit finite-difference suite.
    Gradcheck(Gradcheck),
    /// Train and evaluate variants × strategies × seeds; writes a summary CSV.
    Ablate(Ablate),
    /// Write predicted masks of a split as PGM files.
    DumpMasks(DumpMasks),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "camouflage")]
    kind: SceneKind,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.3)]
    gap: f64,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    base_freq: Option<usize>,
    #[arg(long)]
    octaves: Option<usize>,
    #[arg(long)]
    amplitude: Option<f64>,
}

/// Config sources, applied in order: file, `MCA_SEED`, `--set`, named flags.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                TrainConfig::parse(&text)?
            }
            None => TrainConfig::default(),
        };
        cfg.apply_env()?;
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data {
            cfg.data_root = Some(d.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint; its config replaces all config flags.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Metrics CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',', default_value = "decoder_only,adaptor_plain,mca")]
    variants: Vec<Variant>,
    /// Comma-separated augmentation strategies, e.g. `cj,gray,cj+rs`.
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<AugmentStrategy>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Summary CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpMasks {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn split_dir(root: &Path, split: &str) -> anyhow::Result<PathBuf> {
    if split != "train" && split != "test" {
        bail!("split must be train or test, got {split:?}");
    }
    Ok(root.join(split))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let defaults = SceneSpec::default();
            let spec = SceneSpec {
                kind: a.kind,
                image_size: a.size,
                contrast_gap: a.gap,
                base_freq: a.base_freq.unwrap_or(defaults.base_freq),
                octaves: a.octaves.unwrap_or(defaults.octaves),
                amplitude: a.amplitude.unwrap_or(defaults.amplitude),
                ..defaults
            };
            let ds = Dataset::generate(&spec, a.train, a.test, a.seed)?;
            ds.save(&a.out)?;
            eprintln!("wrote {} train and {} test samples to {}", a.train, a.test, a.out.display());
        }
        Command::Train(a) => {
            let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
            let cfg = match &resumed {
                Some(ck) => TrainConfig::parse(&ck.config)?,
                None => a.cfg.resolve()?,
            };
            let root = cfg.data_root.clone().context("no dataset root: pass --data or set data_root")?;
            let out = a.out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
            let train = dataset::load_split(&root.join("train"))?;
            let mut t = match &resumed {
                Some(ck) => Trainer::resume(ck, &train)?,
                None => Trainer::new(cfg, &train)?,
            };
            let start = Instant::now();
            let logs = t.run()?;
            fs::create_dir_all(&out)?;
            t.checkpoint().save(&out.join("checkpoint.mcaf"))?;
            fs::write(out.join("train_log.csv"), log_csv(&logs))?;
            if let Some(last) = logs.last() {
                eprintln!(
                    "epoch {} total {:.4} train dice {:.4} ({:.1}s)",
                    last.epoch,
                    last.total,
                    last.train_dice,
                    start.elapsed().as_secs_f64()
                );
            }
        }
        Command::Eval(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let samples = dataset::load_split(&split_dir(&a.data, &a.split)?)?;
            let report = trainer::evaluate_checkpoint(&ck, &samples)?;
            write_or_print(a.out.as_deref(), &report.to_csv())?;
        }
        Command::Gradcheck(a) => {
            let start = Instant::now();
            let results = gradcheck::run_suite(a.instances, a.seed)?;
            let mut failed = Vec::new();
            for r in &results {
                println!("{:<18} instances {:>3}  max error {:.3e}", r.op, r.instances, r.max_error);
                if r.max_error.is_nan() || r.max_error >= 1e-4 {
                    failed.push(r.op);
                }
            }
            println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
            if !failed.is_empty() {
                bail!("gradient mismatch in {}", failed.join(", "));
            }
        }
        Command::Ablate(a) => {
            let cfg = a.cfg.resolve()?;
            let root = cfg.data_root.clone().context("no dataset root: pass --data or set data_root")?;
            let data = Dataset::load(&root)?;
            let strategies = if a.strategies.is_empty() {
                vec![cfg.augment.clone()]
            } else {
                a.strategies
            };
            let table = trainer::run_ablation(&cfg, &a.variants, &strategies, &a.seeds, &data)?;
            write_or_print(a.out.as_deref(), &table.to_csv())?;
        }
        Command::DumpMasks(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let (cfg, model) = trainer::model_from_checkpoint(&ck)?;
            let samples = dataset::load_split(&split_dir(&a.data, &a.split)?)?;
            let preds = trainer::predict_all(&model, cfg.variant.uses_adaptors(), &samples)?;
            fs::create_dir_all(&a.out)?;
            for (s, p) in samples.iter().zip(preds) {
                let bin: Vec<f32> = p.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
                let mask = Tensor::new(p.shape().to_vec(), bin)?;
                pnm::save_mask(&a.out.join(format!("{}.pgm", s.id)), &mask)?;
            }
            eprintln!("wrote {} masks to {}", samples.len(), a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
