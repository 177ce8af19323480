use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use candle_core::{DType, Tensor};
use clap::{Args, Parser, Subcommand};
use protodiff::classifier::PrototypeIndex;
use protodiff::config::ExperimentConfig;
use protodiff::dataset::{self, DatasetManifest, ImageSet, Split, SyntheticCounts};
use protodiff::ddim::SamplerPlan;
use protodiff::explain::{explain, render_report, ExplainParams};
use protodiff::export::{export_latents, separation_stats, LatentTable};
use protodiff::train::{build_index, encode_set, evaluate, load_model, reconstruct, Trainer};

#[derive(Parser)]
#[command(name = "protodiff", version, about = "Prototype-based image classification with a contrastive diffusion autoencoder")]
struct Cli {
    /// Log only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-class corpus with its manifest.
    SynthData(SynthArgs),
    /// Train a model (warm-up, then joint objectives).
    Train(TrainArgs),
    /// Accuracy and confusion matrix of a checkpoint on a split.
    Evaluate(EvalArgs),
    /// Print the semantic latent of one image.
    Encode(ImageArgs),
    /// Invert an image to its stochastic code and decode it again.
    Reconstruct(ReconstructArgs),
    /// Classify one image and list its nearest training neighbors.
    Classify(ClassifyArgs),
    /// Write prototype explanation reports for a split.
    Explain(ExplainArgs),
    /// Write the latents of a split as CSV.
    ExportLatents(ExportArgs),
    /// Class-separation statistics of an exported latent table.
    Stats(StatsArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long, env = "PROTODIFF_CONFIG", value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set learning_rate=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, command: &str) -> anyhow::Result<Option<ExperimentConfig>> {
        let Some(path) = &self.config else {
            if self.overrides.is_empty() && self.seed.is_none() {
                return Ok(None);
            }
            return Err(UsageError(format!("{command}: --set and --seed need a --config file")).into());
        };
        let mut config = ExperimentConfig::load(path)?;
        for o in &self.overrides {
            config.apply_override(o).map_err(|e| UsageError(e.to_string()))?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(Some(config))
    }

    fn require(&self, command: &str) -> anyhow::Result<ExperimentConfig> {
        self.load(command)?.ok_or_else(|| {
            UsageError(format!("{command} requires --config <FILE> (or the PROTODIFF_CONFIG environment variable)")).into()
        })
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Images per class, split 80/10/10.
    #[arg(long, required_unless_present = "train")]
    per_class: Option<usize>,
    /// Explicit training images per class (with --val and --test).
    #[arg(long, requires_all = ["val", "test"], conflicts_with = "per_class")]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long, value_name = "CHECKPOINT", conflicts_with = "config")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Trained model (`model.safetensors` or any epoch checkpoint).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to use instead of the one recorded in the checkpoint.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl CheckpointArgs {
    fn manifest(&self, config: &ExperimentConfig) -> anyhow::Result<DatasetManifest> {
        let path = match &self.manifest {
            Some(p) => p.clone(),
            None => config.phase_manifest(config.joint_epochs > 0)?.to_path_buf(),
        };
        Ok(DatasetManifest::load(&path)?)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    checkpoint: CheckpointArgs,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Neighbors in the vote (defaults to the trained K).
    #[arg(long)]
    k: Option<usize>,
    /// Write the metrics JSON here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ImageArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Write the JSON here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Directory for `before.png` and `after.png`.
    #[arg(long)]
    out_dir: PathBuf,
    /// Generative sampler steps (defaults to the config's `decode_steps`).
    #[arg(long)]
    decode_steps: Option<usize>,
    /// Inversion sampler steps (defaults to the config's `invert_steps`).
    #[arg(long)]
    invert_steps: Option<usize>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[command(flatten)]
    checkpoint: CheckpointArgs,
    #[arg(long)]
    image: PathBuf,
    /// Prebuilt prototype index; built from the training split when absent.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    checkpoint: CheckpointArgs,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Reports directory (defaults to `<output_dir>/reports`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Prototypes per report (defaults to the config's explain_k).
    #[arg(long)]
    prototypes: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    checkpoint: CheckpointArgs,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// CSV written by export-latents.
    #[arg(long)]
    latents: PathBuf,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn write_json(value: &impl serde::Serialize, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn image_tensor(pixels: Vec<f32>, size: usize) -> anyhow::Result<Tensor> {
    Ok(Tensor::from_vec(pixels, (1, 1, size, size), &candle_core::Device::Cpu)?)
}

fn save_png(pixels: &[f32], size: usize, path: &Path) -> anyhow::Result<()> {
    let bytes = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(size as u32, size as u32, bytes)
        .context("image buffer size")?
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::SynthData(a) => {
            let config = a.config.load("synth-data")?;
            let size = a
                .image_size
                .or(config.as_ref().map(|c| c.image_size))
                .ok_or_else(|| UsageError("synth-data needs --image-size or --config".into()))?;
            let seed = a.config.seed.or(config.as_ref().map(|c| c.seed)).unwrap_or_default();
            let counts = match (a.per_class, a.train, a.val, a.test) {
                (Some(n), ..) => SyntheticCounts::split(n),
                (None, Some(train), Some(val), Some(test)) => SyntheticCounts { train, val, test },
                _ => bail!(UsageError("give --per-class or all of --train, --val, --test".into())),
            };
            let manifest = dataset::generate_synthetic_counts(counts, size, seed, &a.out)?;
            log::info!("wrote {} images to {}", manifest.records().len(), a.out.display());
            println!("{}", a.out.join("manifest.csv").display());
        }
        Command::Train(a) => {
            let mut trainer = match &a.resume {
                Some(ckpt) => Trainer::resume(ckpt, None)?,
                None => Trainer::new(a.config.require("train")?)?,
            };
            let outcome = trainer.run()?;
            println!("{}", outcome.final_checkpoint.display());
        }
        Command::Evaluate(a) => {
            let (config, model) = load_model(&a.checkpoint.checkpoint)?;
            let manifest = a.checkpoint.manifest(&config)?;
            let train = ImageSet::load(&manifest, Split::Train, config.image_size)?;
            let set = ImageSet::load(&manifest, a.split, config.image_size)?;
            let index = build_index(&model, &train)?;
            let k = a.k.unwrap_or(config.k);
            let result = evaluate(&model, &index, &set, k, config.tau_pred)?;
            log::info!("{} accuracy {:.4} over {} images", a.split, result.accuracy, set.len());
            write_json(&result, a.out.as_deref())?;
        }
        Command::Encode(a) => {
            let (config, model) = load_model(&a.checkpoint)?;
            let x = image_tensor(dataset::load_image(&a.image, config.image_size)?, config.image_size)?;
            let z: Vec<f32> = model.encode_semantic(&x)?.to_dtype(DType::F32)?.squeeze(0)?.to_vec1()?;
            write_json(&z, a.out.as_deref())?;
        }
        Command::Reconstruct(a) => {
            let (config, model) = load_model(&a.checkpoint)?;
            let size = config.image_size;
            let pixels = dataset::load_image(&a.image, size)?;
            let x0 = image_tensor(pixels.clone(), size)?.to_dtype(model.dtype())?;
            let schedule = config.schedule()?;
            let invert = SamplerPlan::uniform(schedule.steps(), a.invert_steps.unwrap_or(config.invert_steps))?;
            let decode = SamplerPlan::uniform(schedule.steps(), a.decode_steps.unwrap_or(config.decode_steps))?;
            let out = reconstruct(&model, &x0, &invert, &decode, &schedule)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
            save_png(&pixels, size, &a.out_dir.join("before.png"))?;
            save_png(&out, size, &a.out_dir.join("after.png"))?;
            let mse = pixels.iter().zip(&out).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / pixels.len() as f64;
            write_json(&serde_json::json!({ "mse": mse }), None)?;
        }
        Command::Classify(a) => {
            let (config, model) = load_model(&a.checkpoint.checkpoint)?;
            let index = match &a.index {
                Some(p) => PrototypeIndex::load(p)?,
                None => {
                    let manifest = a.checkpoint.manifest(&config)?;
                    build_index(&model, &ImageSet::load(&manifest, Split::Train, config.image_size)?)?
                }
            };
            let x = image_tensor(dataset::load_image(&a.image, config.image_size)?, config.image_size)?;
            let z: Vec<f32> = model.encode_semantic(&x)?.to_dtype(DType::F32)?.squeeze(0)?.to_vec1()?;
            let prediction = index.knn_predict(&z, a.k.unwrap_or(config.k), None, config.tau_pred)?;
            write_json(&prediction, None)?;
        }
        Command::Explain(a) => {
            let (config, model) = load_model(&a.checkpoint.checkpoint)?;
            let manifest = a.checkpoint.manifest(&config)?;
            let train = ImageSet::load(&manifest, Split::Train, config.image_size)?;
            let set = ImageSet::load(&manifest, a.split, config.image_size)?;
            let index = build_index(&model, &train)?;
            let params = ExplainParams {
                k: a.prototypes.unwrap_or(config.explain_k),
                knn_k: config.k,
                tau_pred: config.tau_pred,
            };
            let out = a.out.unwrap_or_else(|| config.output_dir.join("reports"));
            let latents = encode_set(&model, &set)?;
            for (i, z) in latents.iter().enumerate() {
                let report = explain(z, &set.refs()[i], set.image(i), Some(set.labels()[i]), &index, &train, params)?;
                render_report(&report, &out)?;
            }
            log::info!("wrote {} reports to {}", set.len(), out.display());
            println!("{}", out.display());
        }
        Command::ExportLatents(a) => {
            let (config, _) = load_model(&a.checkpoint.checkpoint)?;
            let manifest = a.checkpoint.manifest(&config)?;
            let table = export_latents(&a.checkpoint.checkpoint, &manifest, a.split, &a.out)?;
            log::info!("wrote {} latents to {}", table.rows().len(), a.out.display());
        }
        Command::Stats(a) => {
            let table = LatentTable::read_csv(&a.latents)?;
            write_json(&separation_stats(&table)?, None)?;
        }
    }
    Ok(())
}
