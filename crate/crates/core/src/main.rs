//! Command-line front end: decompose images, train, evaluate, enhance, and
//! run the ablation sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relight::ablation::run_ablation;
use relight::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use relight::config::{load_train_config, render_train_config};
use relight::dataset::{load_dataset, synthetic_pairs, write_synthetic_dataset, ImagePair};
use relight::enhancer::enhance_padded;
use relight::imaging::{load_image, save_image};
use relight::retinex::{decompose, recompose};
use relight::segmentation::make_toy_backend;
use relight::train::{evaluate, train, AblationSwitches, TrainConfig};
use relight::{Error, Result};

#[derive(Parser)]
#[command(name = "relight", version, about = "Low-light image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split an image into illumination and reflectance maps.
    Decompose {
        /// Input image (PNG or JPEG).
        #[arg(long, short)]
        input: PathBuf,
        /// Directory for the output maps; defaults to the input's directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Re-read the written maps, recompose them, and verify the
        /// round-trip error against the input.
        #[arg(long)]
        check: bool,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: ConfigArgs,
        /// Checkpoint file to write.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Evaluate a checkpoint on a paired dataset.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long, short)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: ConfigArgs,
        /// Write per-image output metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Enhance a single image with a trained checkpoint.
    Enhance {
        /// Checkpoint to run.
        #[arg(long, short)]
        checkpoint: PathBuf,
        /// Input image (PNG or JPEG).
        #[arg(long, short)]
        input: PathBuf,
        /// Output PNG.
        #[arg(long, short)]
        output: PathBuf,
        /// Also write the intermediate reflectance and illumination maps
        /// next to the output.
        #[arg(long)]
        save_stages: bool,
    },
    /// Retrain with components disabled and tabulate what each contributes.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        overrides: ConfigArgs,
        /// Write both sweeps as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the effective training config as TOML.
    PrintConfig {
        #[command(flatten)]
        overrides: ConfigArgs,
    },
    /// Write a synthetic paired dataset (low/ and high/ directories).
    MakeDataset {
        /// Directory to create.
        #[arg(long, short)]
        output: PathBuf,
        /// Number of pairs.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Where training or evaluation pairs come from.
#[derive(Args)]
struct DataArgs {
    /// Dataset directory containing low/ and high/ subdirectories.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Generate this many synthetic pairs instead of loading a dataset.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Square size of synthetic pairs.
    #[arg(long, default_value_t = 64, requires = "synthetic")]
    image_size: usize,
}

impl DataArgs {
    fn load(&self, seed: u64) -> Result<Vec<ImagePair>> {
        match (&self.data, self.synthetic) {
            (Some(root), None) => Ok(load_dataset(root)?.pairs),
            (None, Some(count)) => Ok(synthetic_pairs(count, self.image_size, self.image_size, seed)),
            (None, None) => Err(Error::Config(
                "pass either --data <dir> or --synthetic <count>".into(),
            )),
            (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
        }
    }
}

/// Config file plus the common command-line overrides.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_train_config(path)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(steps) = self.steps {
            cfg.steps = steps;
        }
        if let Some(batch) = self.batch_size {
            cfg.batch_size = batch;
        }
        if let Some(lr) = self.learning_rate {
            cfg.learning_rate = lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolve, then pin the architecture and backend seeds to a checkpoint.
    /// Ablation switches are cleared so the stored net is used as-is.
    fn resolve_for(&self, meta: &CheckpointMeta) -> Result<TrainConfig> {
        let mut cfg = self.resolve()?;
        cfg.net = meta.net.clone();
        cfg.seg_seed = meta.seg_seed;
        cfg.vl_seed = meta.vl_seed;
        cfg.ablation = AblationSwitches::default();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn with_suffix(dir: &Path, input: &Path, suffix: &str) -> PathBuf {
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string());
    dir.join(format!("{stem}.{suffix}.png"))
}

fn cmd_decompose(input: &Path, output_dir: Option<PathBuf>, check: bool) -> Result<()> {
    let dir = output_dir
        .or_else(|| input.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let img = load_image(input)?.to_rgb();
    let parts = decompose(&img)?;
    let round_trip = recompose(&parts.illumination, &parts.reflectance)?;
    let illum_path = with_suffix(&dir, input, "illumination");
    let refl_path = with_suffix(&dir, input, "reflectance");
    save_image(&parts.illumination, &illum_path)?;
    save_image(&parts.reflectance, &refl_path)?;
    println!("illumination: {}", illum_path.display());
    println!("reflectance:  {}", refl_path.display());
    println!(
        "round-trip max abs error: {:.2e}",
        img.max_abs_diff(&round_trip)?
    );
    if check {
        let rebuilt = recompose(&load_image(&illum_path)?, &load_image(&refl_path)?)?;
        let err = img.max_abs_diff(&rebuilt)?;
        // Decomposition error plus 8-bit quantization of the two maps.
        let bound = 2e-4 + 1.0 / 255.0;
        println!("file round-trip max abs error: {err:.2e} (bound {bound:.2e})");
        if err > bound {
            return Err(Error::invalid(format!(
                "file round-trip error {err:.3e} exceeds {bound:.3e}"
            )));
        }
    }
    Ok(())
}

fn cmd_train(data: &DataArgs, overrides: &ConfigArgs, output: &Path) -> Result<()> {
    let cfg = overrides.resolve()?;
    let pairs = data.load(cfg.seed)?;
    let outcome = train(&cfg, &pairs)?;
    save_checkpoint(output, &outcome.params, &outcome.meta)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "final loss at step {}: total {:.6} (pixel {:.6}, edge {:.6}, semantic {:.6}, multimodal {:+.6})",
            last.step,
            last.loss.total,
            last.loss.pixel,
            last.loss.edge,
            last.loss.semantic,
            last.loss.multimodal
        );
    }
    println!(
        "wrote checkpoint with {} parameters: {}",
        outcome.params.scalar_count(),
        output.display()
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &DataArgs,
    overrides: &ConfigArgs,
    csv: Option<PathBuf>,
    json: Option<PathBuf>,
) -> Result<()> {
    let (params, meta) = load_checkpoint(checkpoint)?;
    let cfg = overrides.resolve_for(&meta)?;
    let pairs = data.load(cfg.seed)?;
    let report = evaluate(&cfg, &params, &pairs)?;
    for rec in &report.records {
        println!(
            "{:<24} psnr {:>6.2} -> {:>6.2} dB  ssim {:.4} -> {:.4}  loss {:.6}",
            rec.name,
            rec.input.psnr,
            rec.output.psnr,
            rec.input.ssim,
            rec.output.ssim,
            rec.loss.total
        );
    }
    println!(
        "mean over {} pairs: psnr {:.2} -> {:.2} dB, ssim {:.4}, loss {:.6}",
        report.records.len(),
        report.mean_input_psnr,
        report.mean_output_psnr,
        report.mean_output_ssim,
        report.mean_loss.total
    );
    if let Some(path) = csv {
        fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
        println!("csv: {}", path.display());
    }
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::invalid(format!("report serialization failed: {e}")))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        println!("report: {}", path.display());
    }
    Ok(())
}

fn cmd_enhance(checkpoint: &Path, input: &Path, output: &Path, save_stages: bool) -> Result<()> {
    let (params, meta) = load_checkpoint(checkpoint)?;
    let backend = make_toy_backend(meta.seg_seed, meta.net.seg_classes, meta.net.scales)?;
    let img = load_image(input)?.to_rgb();
    let enhanced = enhance_padded(&img, &backend, &params, &meta.net)?;
    save_image(&enhanced.output, output)?;
    println!("enhanced: {}", output.display());
    if save_stages {
        let dir = output
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let refl_path = with_suffix(&dir, output, "reflectance");
        let illum_path = with_suffix(&dir, output, "illumination");
        save_image(&enhanced.reflectance, &refl_path)?;
        save_image(&enhanced.illumination, &illum_path)?;
        println!("reflectance:  {}", refl_path.display());
        println!("illumination: {}", illum_path.display());
    }
    Ok(())
}

fn cmd_ablate(
    data: &DataArgs,
    overrides: &ConfigArgs,
    csv: Option<PathBuf>,
    json: Option<PathBuf>,
) -> Result<()> {
    let cfg = overrides.resolve()?;
    let pairs = data.load(cfg.seed)?;
    let report = run_ablation(&cfg, &pairs)?;
    print!("{}", report.to_table());
    if let Some(path) = csv {
        fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
        println!("csv: {}", path.display());
    }
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::invalid(format!("report serialization failed: {e}")))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        println!("report: {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Decompose {
            input,
            output_dir,
            check,
        } => cmd_decompose(input, output_dir.clone(), *check),
        Command::Train {
            data,
            overrides,
            output,
        } => cmd_train(data, overrides, output),
        Command::Eval {
            checkpoint,
            data,
            overrides,
            csv,
            json,
        } => cmd_eval(checkpoint, data, overrides, csv.clone(), json.clone()),
        Command::Enhance {
            checkpoint,
            input,
            output,
            save_stages,
        } => cmd_enhance(checkpoint, input, output, *save_stages),
        Command::Ablate {
            data,
            overrides,
            csv,
            json,
        } => cmd_ablate(data, overrides, csv.clone(), json.clone()),
        Command::PrintConfig { overrides } => {
            print!("{}", render_train_config(&overrides.resolve()?)?);
            Ok(())
        }
        Command::MakeDataset {
            output,
            count,
            size,
            seed,
        } => {
            write_synthetic_dataset(output, *count, *size, *size, *seed)?;
            println!("wrote {count} pairs under {}", output.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
