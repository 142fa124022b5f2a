use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use iharmon_core::dataset::toy::write_toy_sources;
use iharmon_core::dataset::{build_dataset, Annotations};
use iharmon_core::evaluation::{evaluate, EvalOptions, EvalReport, EvalResolution, Method};
use iharmon_core::inference::{color_transfer, harmonize, BlendRatios, HarmonizeRequest};
use iharmon_core::io;
use iharmon_core::model::{IphModel, ModelConfig};
use iharmon_core::training::{final_checkpoint_path, init_weights, train_stage, StageConfig, TrainState};
use iharmon_service::{AppState, LoadedModel, ServiceConfig};

#[derive(Parser)]
#[command(name = "iharmon", version, about = "Region-guided image harmonization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a composite dataset from annotated source images.
    Synth {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        ann: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render procedural source scenes plus an annotation file.
    ToySources {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write freshly initialized weights.
    Init {
        #[arg(long)]
        out: PathBuf,
        /// JSON model configuration; defaults to the full-size model.
        #[arg(long, conflicts_with = "toy")]
        model: Option<PathBuf>,
        /// Use the small desk-scale configuration.
        #[arg(long)]
        toy: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: u8,
        /// JSON or TOML stage configuration.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to continue from: the previous stage's result or a
        /// mid-stage checkpoint of this stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Final weights; defaults to `<checkpoint_dir>/stage<N>_final.ihw`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Harmonize one composite.
    Run {
        #[arg(long)]
        composite: PathBuf,
        #[arg(long)]
        fg_mask: PathBuf,
        /// Reference region; the whole background when omitted.
        #[arg(long)]
        guide_mask: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "color_weights")]
        r1: Option<f64>,
        #[arg(long, requires = "color_weights")]
        r2: Option<f64>,
        #[arg(long)]
        color_weights: Option<PathBuf>,
    },
    /// Score a model and the direct-composite baseline on a dataset.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Resolution::Native)]
        resolution: Resolution,
        #[arg(long)]
        foreground_only: bool,
    },
    /// Start the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        color_weights: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        workers: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Resolution {
    Native,
    #[value(name = "256")]
    Fixed256,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth {
            src,
            ann,
            out,
            count,
            seed,
        } => {
            let annotations = Annotations::load(&ann)?;
            let manifest = build_dataset(&src, &annotations, &out, count, seed)?;
            println!("wrote {} records to {}", manifest.records.len(), out.display());
        }
        Command::ToySources { out, count, size, seed } => {
            write_toy_sources(&out, count, size, seed)?;
            println!("wrote {count} scenes to {}", out.display());
        }
        Command::Init { out, model, toy, seed } => {
            let config = match (model, toy) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(&path).with_context(|| path.display().to_string())?;
                    serde_json::from_str(&text)?
                }
                (None, true) => ModelConfig::toy(),
                (None, false) => ModelConfig::default(),
            };
            config.validate()?;
            init_weights(config, seed, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Train {
            stage,
            config,
            resume,
            out,
        } => {
            let cfg = StageConfig::load(&config)?;
            if cfg.stage != stage {
                bail!("--stage {stage} but {} declares stage {}", config.display(), cfg.stage);
            }
            let state = match &resume {
                Some(path) => TrainState::load(path)?,
                None if stage == 1 => {
                    let model = cfg.model.clone().unwrap_or_else(|| ModelConfig {
                        resolution: cfg.resolution,
                        ..ModelConfig::default()
                    });
                    TrainState::fresh(model, cfg.seed)?
                }
                None => bail!("stage {stage} needs --resume with the stage {} weights", stage - 1),
            };
            let state = train_stage(state, &cfg)?;
            // train_stage already wrote the final checkpoint into checkpoint_dir.
            let out = match (out, &cfg.checkpoint_dir) {
                (Some(p), _) => {
                    state.save(&p)?;
                    p
                }
                (None, Some(dir)) => final_checkpoint_path(dir, stage),
                (None, None) => {
                    let p = PathBuf::from(format!("stage{stage}_final.ihw"));
                    state.save(&p)?;
                    p
                }
            };
            println!(
                "stage {stage} finished at step {}, running loss {:.5}; weights in {}",
                state.step,
                state.running_loss.unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Run {
            composite,
            fg_mask,
            guide_mask,
            weights,
            out,
            r1,
            r2,
            color_weights,
        } => {
            let guide = guide_mask.map(io::read_mask).transpose()?;
            let req = HarmonizeRequest::new(io::read_image(&composite)?, io::read_mask(&fg_mask)?, guide);
            let (model, _) = IphModel::load(&weights, None)?;
            let result = match &color_weights {
                Some(path) => {
                    let (color, _) = IphModel::load(path, None)?;
                    let ratios = BlendRatios::new(r1.unwrap_or(1.0), r2.unwrap_or(1.0))?;
                    color_transfer(&req, ratios, &model, &color)?
                }
                None => harmonize(&req, &model)?,
            };
            io::write_image(&result.image, &out)?;
            if result.used_default_reference {
                log::info!("no guide mask given; used the whole background as reference");
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            weights,
            data,
            out,
            resolution,
            foreground_only,
        } => {
            let (model, _) = IphModel::load(&weights, None)?;
            let opts = EvalOptions {
                resolution: match resolution {
                    Resolution::Native => EvalResolution::Native,
                    Resolution::Fixed256 => EvalResolution::Fixed256,
                },
                foreground_only,
            };
            let label = weights.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
            let methods = [
                Method::DirectComposite,
                Method::Model {
                    label: &label,
                    model: &model,
                },
            ]
            .iter()
            .map(|m| evaluate(m, &data, &opts))
            .collect::<iharmon_core::Result<Vec<_>>>()?;
            for m in &methods {
                let r = &m.row;
                println!("{:<24} psnr {:>7.2}  ssim {:.4}  mse {:>9.2}  n {}", r.method, r.psnr, r.ssim, r.mse, r.n_images);
            }
            EvalReport {
                dataset: data.display().to_string(),
                options: opts,
                methods,
            }
            .save(&out)?;
        }
        Command::Serve {
            port,
            host,
            weights,
            color_weights,
            workers,
        } => {
            let harmonizer = weights.map(|p| LoadedModel::load(p, None)).transpose()?;
            let color = color_weights.map(|p| LoadedModel::load(p, None)).transpose()?;
            if harmonizer.is_none() {
                log::warn!("no --weights given; harmonization requests will answer 503");
            }
            let cfg = ServiceConfig {
                workers,
                ..ServiceConfig::default()
            };
            let state = Arc::new(AppState::new(cfg, harmonizer, color));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                log::info!("listening on http://{}", listener.local_addr()?);
                iharmon_service::serve(listener, state).await
            })?;
        }
    }
    Ok(())
}
