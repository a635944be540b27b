use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gridflow_cli::config::{validate, RunConfig};
use gridflow_cli::{commands, exit_code, Predictor};

/// Trajectory-grid generation harness: simulate datasets, train the VAE and
/// denoiser, sample futures, and evaluate the metric suite.
#[derive(Parser)]
#[command(name = "gridflow", version, about)]
struct Cli {
    /// JSON run configuration; unspecified fields take documented defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for the compute pool (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Serialize the compute pool to one worker. Outputs are already
    /// byte-deterministic for a fixed seed and worker count; this pins the
    /// worker count too.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulator dataset.
    Generate {
        /// Number of scenes.
        #[arg(long, default_value_t = 16)]
        scenes: usize,
    },
    /// Train the trajectory VAE on a dataset.
    TrainVae {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train the rectified-flow denoiser.
    TrainDenoiser {
        #[arg(long)]
        dataset: PathBuf,
        /// VAE checkpoint (required in latent mode).
        #[arg(long)]
        vae: Option<PathBuf>,
    },
    /// Draw K futures for one conditioning image.
    Sample {
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        vae: Option<PathBuf>,
        /// Scene directory providing the conditioning image.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Or a bare PPM image.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate samples over a dataset and score the full metric suite.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        /// model | static | gt
        #[arg(long, default_value = "model")]
        predictor: String,
    },
    /// Ground-truth half-split vs velocity-shuffled metric ordering.
    MetricSanity {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train latent and raw denoisers under one budget and compare probes.
    AblateRaw {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        vae: PathBuf,
    },
    /// Decode latent interpolations between two futures of a scene.
    Interp {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        future_i: usize,
        #[arg(long, default_value_t = 1)]
        future_j: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
}

fn run(cli: Cli) -> gridflow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    validate(&cfg)?;

    let workers = if cli.deterministic {
        1
    } else {
        cli.workers
    };
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| gridflow::Error::Validation(format!("thread pool: {e}")))?;
    }

    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.out_dir));

    match cli.command {
        Command::Generate { scenes } => commands::cmd_generate(&cfg, scenes, &out),
        Command::TrainVae { dataset } => {
            commands::cmd_train_vae(&cfg, &dataset, &out).map(|_| ())
        }
        Command::TrainDenoiser { dataset, vae } => {
            commands::cmd_train_denoiser(&cfg, &dataset, vae.as_deref(), &out).map(|_| ())
        }
        Command::Sample {
            denoiser,
            vae,
            scene,
            image,
            k,
            steps,
        } => commands::cmd_sample(
            &cfg,
            vae.as_deref(),
            &denoiser,
            scene.as_deref(),
            image.as_deref(),
            k.unwrap_or(cfg.sample.k),
            steps.unwrap_or(cfg.sample.steps),
            &out,
        ),
        Command::Evaluate {
            dataset,
            denoiser,
            vae,
            predictor,
        } => {
            let predictor = match predictor.as_str() {
                "model" => Predictor::Model,
                "static" => Predictor::Static,
                "gt" => Predictor::Gt,
                other => {
                    return Err(gridflow::Error::Validation(format!(
                        "usage: unknown predictor {other} (model|static|gt)"
                    )))
                }
            };
            commands::cmd_evaluate(
                &cfg,
                vae.as_deref(),
                denoiser.as_deref(),
                &dataset,
                predictor,
                &out,
            )
            .map(|_| ())
        }
        Command::MetricSanity { dataset } => {
            commands::cmd_metric_sanity(&cfg, &dataset, &out).map(|_| ())
        }
        Command::AblateRaw { dataset, vae } => {
            commands::cmd_ablate_raw(&cfg, &dataset, &vae, &out)
        }
        Command::Interp {
            vae,
            scene,
            future_i,
            future_j,
            steps,
        } => commands::cmd_interp(&cfg, &vae, &scene, future_i, future_j, steps, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
