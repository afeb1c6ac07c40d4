//! Command-line harness for the lgq library: train, evaluate, export,
//! verify, and run ablations.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use lgq::ablate::{run_ablation, to_csv, Arm};
use lgq::config::{apply_config, parse_estimator, parse_scale_rule, print_config, set_field};
use lgq::export::{export_model, load_exported, verify_against};
use lgq::nn::Arch;
use lgq::train::{
    evaluate, load_checkpoint, load_dataset, resume, train, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "lgq",
    about = "Quantization-aware training with learned scales and soft rounding",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint + metrics CSV to the run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Export a checkpoint to an integer-weight artifact.
    Export(ExportArgs),
    /// Check that an exported artifact reproduces its checkpoint's predictions.
    Verify(VerifyArgs),
    /// Train one configuration across several seeds per ablation arm.
    Ablate(AblateArgs),
    /// Print the effective configuration (defaults + file + overrides).
    PrintConfig(ConfigArgs),
}

/// Configuration layering shared by the training-flavored subcommands:
/// defaults, then `--config` file, then typed flags, then `--set` pairs.
#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (key = value lines with [sections]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set lambda_cap=30 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Architecture: mlp256, vgg7-small, or resnet20-small.
    #[arg(long)]
    arch: Option<String>,
    /// Dataset: mnist, cifar10, synth-mnist, or synth-cifar10.
    #[arg(long)]
    dataset: Option<String>,
    /// Dataset root directory (default: $LGQ_DATA_DIR or ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Run output directory (checkpoint, CSV logs).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Weight bit width (2-8, or 32 for float).
    #[arg(long)]
    weight_bits: Option<u8>,
    /// Activation bit width (2-8, or 32 for float).
    #[arg(long)]
    act_bits: Option<u8>,
    /// Gradient estimator: ste, asr, or asr-mde.
    #[arg(long)]
    estimator: Option<String>,
    /// Scale learning rule: ssg, llsq-grid, or fixed.
    #[arg(long)]
    scale_rule: Option<String>,
    /// Quantize the first and last layers too.
    #[arg(long)]
    quantize_first_last: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Scale-search step size.
    #[arg(long)]
    alpha_lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Soft-round sharpness at epoch 0.
    #[arg(long)]
    lambda_initial: Option<f32>,
    /// Sharpness increase per epoch.
    #[arg(long)]
    lambda_growth: Option<f32>,
    /// Sharpness ceiling.
    #[arg(long)]
    lambda_cap: Option<f32>,
    /// Iterations between scale-search spread checks.
    #[arg(long)]
    ssg_iter_target: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on training samples (0 = all).
    #[arg(long)]
    train_subset: Option<usize>,
    /// Cap on test samples (0 = all).
    #[arg(long)]
    test_subset: Option<usize>,
    /// Samples generated for a synth-* training split.
    #[arg(long)]
    synth_train: Option<usize>,
    /// Samples generated for a synth-* test split.
    #[arg(long)]
    synth_test: Option<usize>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

impl ConfigArgs {
    fn build(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig {
            verbose: true,
            ..RunConfig::default()
        };
        if let Ok(dir) = std::env::var("LGQ_DATA_DIR") {
            cfg.data_dir = PathBuf::from(dir);
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            apply_config(&mut cfg, &text)?;
        }
        if let Some(v) = &self.arch {
            cfg.arch = Arch::parse(v)?;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = &self.data_dir {
            cfg.data_dir = v.clone();
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.weight_bits {
            cfg.weight_bits = v;
        }
        if let Some(v) = self.act_bits {
            cfg.act_bits = v;
        }
        if let Some(v) = &self.estimator {
            cfg.estimator = parse_estimator(v)?;
        }
        if let Some(v) = &self.scale_rule {
            cfg.scale_rule = parse_scale_rule(v)?;
        }
        if let Some(v) = self.quantize_first_last {
            cfg.quantize_first_last = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.alpha_lr {
            cfg.alpha_lr = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.warmup_epochs {
            cfg.warmup_epochs = v;
        }
        if let Some(v) = self.lambda_initial {
            cfg.lambda.initial = v;
        }
        if let Some(v) = self.lambda_growth {
            cfg.lambda.growth = v;
        }
        if let Some(v) = self.lambda_cap {
            cfg.lambda.cap = v;
        }
        if let Some(v) = self.ssg_iter_target {
            cfg.ssg_iter_target = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.train_subset {
            cfg.train_subset = v;
        }
        if let Some(v) = self.test_subset {
            cfg.test_subset = v;
        }
        if let Some(v) = self.synth_train {
            cfg.synth_train = v;
        }
        if let Some(v) = self.synth_test {
            cfg.synth_test = v;
        }
        for pair in &self.sets {
            let Some((k, v)) = pair.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {pair:?}");
            };
            set_field(&mut cfg, k.trim(), v)?;
        }
        if self.quiet {
            cfg.verbose = false;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Resume from this checkpoint instead of initializing fresh weights.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate the train split instead of test.
    #[arg(long)]
    train_split: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ExportArgs {
    /// Checkpoint to export.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output artifact path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Exported artifact.
    #[arg(long)]
    exported: PathBuf,
    /// Reference checkpoint it was exported from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of test samples to compare.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Ablation axis: estimator (ste/asr/asr-mde) or scale-rule (ssg/llsq-grid).
    #[arg(long)]
    axis: String,
    /// Comma-separated training seeds shared by all arms.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(args) => {
            let cfg = args.config.build()?;
            let out = match &args.resume {
                Some(ckpt) => resume(&cfg, ckpt)?,
                None => train(&cfg)?,
            };
            if let Some(last) = out.history.last() {
                println!(
                    "final: epoch {} train {:.2}% test {:.2}%",
                    last.epoch,
                    100.0 * last.train_acc,
                    100.0 * last.test_acc
                );
            }
            println!("checkpoint: {}", out.checkpoint.display());
            println!("metrics: {}", cfg.out_dir.join("train_log.csv").display());
        }
        Cmd::Eval(args) => {
            let cfg = args.config.build()?;
            let (mut model, epochs) = load_checkpoint(&args.checkpoint)?;
            let (train_ds, test_ds) = load_dataset(&cfg)?;
            let ds = if args.train_split { &train_ds } else { &test_ds };
            let (loss, acc) = evaluate(&mut model, ds, cfg.batch_size.max(2))?;
            println!(
                "{} split, {} samples, checkpoint at epoch {epochs}: loss {loss:.4}, accuracy {:.2}%",
                if args.train_split { "train" } else { "test" },
                ds.len(),
                100.0 * acc
            );
        }
        Cmd::Export(args) => {
            let (model, _) = load_checkpoint(&args.checkpoint)?;
            let coded = export_model(&model, &args.out)?;
            let bytes = std::fs::metadata(&args.out)?.len();
            println!(
                "wrote {} ({} coded tensors, {} bytes)",
                args.out.display(),
                coded,
                bytes
            );
        }
        Cmd::Verify(args) => {
            let cfg = args.config.build()?;
            let mut exported = load_exported(&args.exported)?;
            let (mut reference, _) = load_checkpoint(&args.checkpoint)?;
            let (_, test_ds) = load_dataset(&cfg)?;
            let report = verify_against(
                &mut exported,
                &mut reference,
                &test_ds,
                args.samples,
                cfg.batch_size.max(2),
            )?;
            println!(
                "{}/{} argmax agreement ({:.2}%), max |logit diff| {:e}",
                report.matches,
                report.samples,
                100.0 * report.agreement(),
                report.max_abs_logit_diff
            );
            if report.matches != report.samples {
                bail!("exported model disagrees with its checkpoint");
            }
        }
        Cmd::Ablate(args) => {
            let base = args.config.build()?;
            let arms: Vec<Arm> = match args.axis.as_str() {
                "estimator" => ["ste", "asr", "asr-mde"]
                    .iter()
                    .map(|name| {
                        let mut cfg = base.clone();
                        cfg.estimator = parse_estimator(name).expect("fixed arm names");
                        Arm {
                            name: name.to_string(),
                            cfg,
                        }
                    })
                    .collect(),
                "scale-rule" => ["ssg", "llsq-grid"]
                    .iter()
                    .map(|name| {
                        let mut cfg = base.clone();
                        cfg.scale_rule = parse_scale_rule(name).expect("fixed arm names");
                        Arm {
                            name: name.to_string(),
                            cfg,
                        }
                    })
                    .collect(),
                other => bail!("unknown axis {other:?}; expected estimator or scale-rule"),
            };
            let seeds: Vec<u64> = args
                .seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed {s:?}")))
                .collect::<anyhow::Result<_>>()?;
            let results = run_ablation(&arms, &seeds)?;
            let csv = to_csv(&results, &seeds);
            let path = base.out_dir.join("ablation.csv");
            std::fs::create_dir_all(&base.out_dir)?;
            std::fs::write(&path, &csv)?;
            print!("{csv}");
            println!("written: {}", path.display());
        }
        Cmd::PrintConfig(args) => {
            let cfg = args.build()?;
            print!("{}", print_config(&cfg));
        }
    }
    Ok(())
}
