//! `nutrifuse`: generate corpora, train, evaluate, predict, ablate and finetune.

use clap::{Args, Parser, Subcommand};
use nutrifuse_core::checkpoint::Checkpoint;
use nutrifuse_core::config::Config;
use nutrifuse_core::dataset::{load_image, load_sample, resize};
use nutrifuse_core::losses::{ComparisonReport, PmaeReport};
use nutrifuse_core::synth::{gen_dataset, Split, MANIFEST_FILE};
use nutrifuse_core::train::{ablate, evaluate, finetune, load_split, predict_batch, train, write_log, EpochLog, TrainOptions};
use nutrifuse_core::{Error, TASK_NAMES, TASK_UNITS};
use nutrifuse_tensor::{Tensor, TensorError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "nutrifuse", version, about = "Food nutrition estimation from RGB and monocular depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply to anything it leaves out.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config, Error> {
        let base = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        base.with_overrides(&self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into `paths.data`.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on the train split and save a checkpoint to `paths.checkpoint`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Report per-task PMAE of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Corpus directory; defaults to the one the checkpoint was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Print only the machine-readable record.
        #[arg(long)]
        json: bool,
    },
    /// Predict the five nutrition quantities for one image tensor file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth depth file handed to the configured depth provider.
        #[arg(long)]
        depth: Option<PathBuf>,
        /// Seed for the synthetic depth provider's corruption.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Train and test the four cumulative module configurations.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        json: bool,
    },
    /// Continue training a checkpoint on the corpus named by the config.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) | Error::Tensor(TensorError::NonFinite { .. }) | Error::Tensor(TensorError::NumericIntegrity { .. }) => 3,
        _ => 2,
    }
}

fn ensure_corpus(cfg: &Config) -> Result<(), Error> {
    if !cfg.paths.data.join(MANIFEST_FILE).exists() {
        eprintln!("generating corpus in {}", cfg.paths.data.display());
        gen_dataset(&cfg.data, &cfg.paths.data)?;
    }
    Ok(())
}

fn print_epoch(e: &EpochLog) {
    let val = e.val_mean_pmae.map_or(String::new(), |v| format!(" val {v:.2}%"));
    let train_mean = 100.0 * e.train_pmae.iter().sum::<f64>() / e.train_pmae.len() as f64;
    eprintln!("epoch {:>3} lr {:.2e} loss {:.4} train {train_mean:.2}%{val}", e.epoch, e.lr, e.loss);
}

fn print_report(report: &PmaeReport, label: &str, json: bool) {
    if !json {
        println!("{}", PmaeReport::table_header());
        println!("{}", report.table_row(label));
    }
    println!("{}", report.to_json());
}

fn print_comparison(report: &ComparisonReport, json: bool) {
    if !json {
        println!("{}", report.table());
    }
    println!("{}", report.to_records());
}

fn save_outcome(cfg: &Config, ckpt: &Checkpoint<f32>, log: &[EpochLog]) -> Result<(), Error> {
    ckpt.save(&cfg.paths.checkpoint)?;
    if let Some(p) = &cfg.paths.log {
        write_log(p, log)?;
    }
    eprintln!("saved {}", cfg.paths.checkpoint.display());
    Ok(())
}

fn predict(checkpoint: &Path, image: &Path, depth: Option<&Path>, seed: u64, json: bool) -> Result<(), Error> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let cfg = &ckpt.config;
    let model = ckpt.to_model()?;
    let size = cfg.model.input_size;
    let (rgb, d_mono) = match depth {
        Some(d) => {
            let provider = cfg.depth.provider()?;
            let (rgb, d_mono, _) = load_sample(image, d, seed, size, provider.as_ref(), cfg.depth.max_abs)?;
            (rgb, Some(d_mono))
        }
        None if cfg.model.uses_depth() => {
            return Err(Error::Config("this checkpoint fuses depth; pass --depth".into()));
        }
        None => {
            let img = load_image(image)?;
            let (h, w) = (img.shape()[2], img.shape()[3]);
            let rgb = resize(img.reshape(&[3, h, w])?, size)?;
            let rgb: Vec<f32> = rgb.to_vec().iter().map(|&v| v as f32).collect();
            (rgb, None)
        }
    };
    let rgb = Tensor::<f32>::from_vec(&[1, 3, size, size], rgb)?;
    let d_mono = d_mono.map(|d| Tensor::<f32>::from_vec(&[1, 1, size, size], d)).transpose()?;
    let p = predict_batch(&model, &rgb, d_mono.as_ref())?[0];
    if !json {
        for ((name, unit), v) in TASK_NAMES.iter().zip(TASK_UNITS).zip(p.to_array()) {
            println!("{name:<10}{v:>10.2} {unit}");
        }
    }
    let units: serde_json::Map<String, serde_json::Value> =
        TASK_NAMES.iter().zip(TASK_UNITS).map(|(n, u)| (n.to_string(), u.into())).collect();
    let record = serde_json::json!({
        "image": image.display().to_string(),
        "prediction": p,
        "units": units,
        "config_fingerprint": ckpt.config_fingerprint,
    });
    println!("{record}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { cfg } => {
            let cfg = cfg.load()?;
            let manifests = gen_dataset(&cfg.data, &cfg.paths.data)?;
            let train_count = manifests.iter().filter(|m| m.split == Split::Train).count();
            println!(
                "{}",
                serde_json::json!({
                    "dir": cfg.paths.data.display().to_string(),
                    "scenes": manifests.len(),
                    "train": train_count,
                    "test": manifests.len() - train_count,
                })
            );
        }
        Command::Train { cfg } => {
            let cfg = cfg.load()?;
            ensure_corpus(&cfg)?;
            let data = load_split(&cfg, Split::Train)?;
            let out = train::<f32>(
                &cfg,
                &data,
                TrainOptions { checkpoint_path: Some(&cfg.paths.checkpoint), on_epoch: Some(&print_epoch), ..Default::default() },
            )?;
            save_outcome(&cfg, &out.checkpoint(&cfg), &out.log)?;
            println!("{}", serde_json::json!({ "epochs": out.log.len(), "best_epoch": out.best_epoch }));
        }
        Command::Eval { checkpoint, split, data, json } => {
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            let mut cfg = ckpt.config.clone();
            if let Some(d) = data {
                cfg.paths.data = d;
            }
            let model = ckpt.to_model()?;
            let set = load_split(&cfg, split)?;
            let (report, _) = evaluate(&model, &set, cfg.train.eval_batch_size)?;
            print_report(&report, &format!("{split:?}").to_lowercase(), json);
        }
        Command::Predict { checkpoint, image, depth, seed, json } => predict(&checkpoint, &image, depth.as_deref(), seed, json)?,
        Command::Ablate { cfg, json } => {
            let cfg = cfg.load()?;
            ensure_corpus(&cfg)?;
            let report = ablate::<f32>(&cfg, &load_split(&cfg, Split::Train)?, &load_split(&cfg, Split::Test)?)?;
            print_comparison(&report, json);
        }
        Command::Finetune { checkpoint, cfg } => {
            let cfg = cfg.load()?;
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            ensure_corpus(&cfg)?;
            let data = load_split(&cfg, Split::Train)?;
            let out = finetune(&ckpt, &cfg, &data, Some(&cfg.paths.checkpoint))?;
            save_outcome(&cfg, &out.checkpoint(&cfg), &out.log)?;
            println!("{}", serde_json::json!({ "epochs": out.log.len(), "best_epoch": out.best_epoch }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
