use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use cellpilot::augment::Sample;
use cellpilot::dataio::{
    make_manifest, synth_dataset, write_synth_dataset, DatasetManifest, ManifestRules, Split, SynthConfig,
};
use cellpilot::evalharness::{emit_report, run_dataset, EvalConfig, EvalReport, StartMode};
use cellpilot::model::{inject_lora, load_checkpoint, save_checkpoint, ModelConfig, ToyBackbone};
use cellpilot::service::{serve, AppState, EnvSettings};
use cellpilot::training::{split_validation, train_split, TrainConfig};

#[derive(Parser)]
#[command(
    name = "cellpilot",
    version,
    about = "Interactive cell and gland segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune LoRA adapters and the decoder.
    Train {
        /// TOML file with optional [train] and [model] tables.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest (JSONL), or `synth:N` for N generated blob images.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh backbone.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// IoU-versus-clicks evaluation.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Manifest (JSONL), or `synth:N`.
        #[arg(long)]
        data: String,
        /// `point`, `box` or `both`.
        #[arg(long, default_value = "both")]
        start: String,
        #[arg(long, default_value_t = 5)]
        clicks: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the HTTP annotation service (configured through CELLPILOT_* variables).
    Serve,
    /// Write the synthetic blob dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a JSONL manifest from `images/` and `masks/` below a root.
    Manifest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        val: f64,
        #[arg(long, default_value_t = 0.0)]
        test: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a freshly initialised toy checkpoint.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inject LoRA adapters before saving.
        #[arg(long)]
        lora: bool,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RunConfig {
    train: TrainConfig,
    model: ModelConfig,
}

fn load_split(data: &str, split: Split, seed: u64) -> anyhow::Result<Vec<Sample>> {
    if let Some(n) = data.strip_prefix("synth:") {
        let images: usize = n.parse().context("synth:N needs an image count")?;
        // Test data uses a different stream from training data.
        let offset = if split == Split::Train { 0 } else { 0x7e57 };
        return Ok(synth_dataset(&SynthConfig {
            images,
            seed: seed ^ offset,
            ..Default::default()
        }));
    }
    let manifest = DatasetManifest::read(Path::new(data)).with_context(|| format!("reading {data}"))?;
    Ok(manifest.load(split)?)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            data,
            out,
            init,
        } => {
            let cfg: RunConfig = match config {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => RunConfig::default(),
            };
            cfg.train.validate()?;
            let mut model = match init {
                Some(p) => load_checkpoint(&p, None)?,
                None => ToyBackbone::new(cfg.model.clone(), cfg.train.seed)?,
            };
            if !model.lora_injected() {
                let lora = model.config().lora.clone();
                model = inject_lora(model, &lora)?;
            }
            let all = load_split(&data, Split::Train, cfg.train.seed)?;
            let mut val = if data.starts_with("synth:") {
                Vec::new()
            } else {
                load_split(&data, Split::Val, cfg.train.seed)?
            };
            let train = if val.is_empty() {
                let (t, v) = split_validation(all.len(), cfg.train.val_fraction, cfg.train.seed);
                val = v.iter().map(|&i| all[i].clone()).collect();
                t.iter().map(|&i| all[i].clone()).collect()
            } else {
                all
            };
            log::info!("training on {} images, validating on {}", train.len(), val.len());
            let outcome = train_split(model, &train, &val, &cfg.train, Some(&out))?;
            save_checkpoint(&outcome.model, out.join("final.ckpt"))?;
            log::info!("wrote {}", out.join("final.ckpt").display());
        }
        Command::Eval {
            model,
            data,
            start,
            clicks,
            out,
            split,
            instances,
            seed,
        } => {
            let model = load_checkpoint(&model, None)?;
            let split: Split = serde_json::from_value(serde_json::Value::String(split.clone()))
                .with_context(|| format!("unknown split {split}"))?;
            let samples = load_split(&data, split, seed)?;
            if samples.is_empty() {
                bail!("no images in the {split:?} split of {data}");
            }
            let starts = match start.as_str() {
                "both" => vec![StartMode::Point, StartMode::Box],
                s => vec![s.parse()?],
            };
            let name = data
                .strip_prefix("synth:")
                .map(|_| "synthetic".to_string())
                .unwrap_or_else(|| {
                    DatasetManifest::read(Path::new(&data))
                        .map(|m| m.name)
                        .unwrap_or_default()
                });
            let mut report = EvalReport::default();
            for start in starts {
                let cfg = EvalConfig {
                    instances_per_image: instances,
                    max_clicks: clicks,
                    start,
                    seed,
                    ..Default::default()
                };
                report.merge(run_dataset(&model, &name, &samples, &cfg)?);
            }
            let paths = emit_report(&report, &out)?;
            print!("{}", report.to_csv());
            log::info!("wrote {}", paths.csv.display());
        }
        Command::Serve => {
            let env = EnvSettings::from_env()?;
            let model = env.load_model()?;
            let detector = env.detector.build(env.service.timeout);
            let state = AppState::new(model, detector, env.service.clone())?;
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(serve(state))?;
        }
        Command::Synth { out, images, seed } => {
            write_synth_dataset(
                &out,
                &SynthConfig {
                    images,
                    seed,
                    ..Default::default()
                },
            )?;
            log::info!("wrote {images} images to {}", out.display());
        }
        Command::Manifest {
            root,
            out,
            val,
            test,
            seed,
        } => {
            let rules = ManifestRules {
                val_fraction: val,
                test_fraction: test,
                seed,
                ..Default::default()
            };
            let manifest = make_manifest(&root, &rules)?;
            manifest.write(&out)?;
            if !manifest.rejects.is_empty() {
                let rejects = out.with_extension("rejects.jsonl");
                manifest.write_rejects(&rejects)?;
                log::warn!(
                    "{} images without annotations, listed in {}",
                    manifest.rejects.len(),
                    rejects.display()
                );
            }
            log::info!("{} entries written to {}", manifest.entries.len(), out.display());
        }
        Command::Init { out, seed, lora } => {
            let cfg = ModelConfig::default();
            let mut model = ToyBackbone::new(cfg.clone(), seed)?;
            if lora {
                model = inject_lora(model, &cfg.lora)?;
            }
            save_checkpoint(&model, &out)?;
        }
    }
    Ok(())
}
