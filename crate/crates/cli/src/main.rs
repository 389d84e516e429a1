use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dit_anima::guidance::GuidanceScales;
use dit_anima::Result;
use dit_anima_cli::commands::{self, Axis, SEED_ENV};
use dit_anima_cli::config::RunConfig;
use dit_anima_cli::exit_code;

#[derive(Parser)]
#[command(name = "dit-anima", version, about = "Audio-driven portrait diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides DIT_ANIMA_SEED and the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Guidance {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    lambda_a: Option<f32>,
    #[arg(long)]
    lambda_t: Option<f32>,
    #[arg(long)]
    lambda_i: Option<f32>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Identity phase then audio phase on the synthetic corpus.
    Train {
        #[command(flatten)]
        common: Common,
        /// Defaults to the config `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One guided clip as an NDT1 latent.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: Guidance,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chained clips conditioned on motion frames.
    Extrapolate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        guidance: Guidance,
        /// Defaults to `[conditions] clips`.
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare the variants of one design axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter a clip manifest with the `[filter]` policy.
    Curate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histograms and hours per source for a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluation metrics on NDT1 dumps.
    #[command(subcommand)]
    Metrics(Metrics),
    /// Finite-difference check of every primitive and a transformer block.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum Metrics {
    /// Fréchet distance between two `[n, d]` feature dumps.
    Frechet {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Mean flow magnitude of a `[frames, H, W, 2]` dump.
    Dyndeg {
        #[arg(long)]
        flows: PathBuf,
    },
}

fn setup(common: &Common) -> Result<(RunConfig, u64)> {
    let cfg = commands::load_config(&common.config)?;
    let env = std::env::var(SEED_ENV).ok();
    let seed = commands::resolve_seed(common.seed, env.as_deref(), cfg.seed)?;
    Ok((cfg, seed))
}

fn scales(cfg: &RunConfig, g: &Guidance) -> Result<GuidanceScales> {
    let d = cfg.guidance.scales;
    GuidanceScales::new(
        g.lambda_a.unwrap_or(d.lambda_a),
        g.lambda_t.unwrap_or(d.lambda_t),
        g.lambda_i.unwrap_or(d.lambda_i),
    )
}

fn out_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.output.clone())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { common, out } => {
            let (cfg, seed) = setup(&common)?;
            let dir = commands::train(&cfg, seed, &out_dir(&out, &cfg))?;
            eprintln!("checkpoint written to {}", dir.display());
        }
        Cmd::Sample { common, guidance, out } => {
            let (cfg, seed) = setup(&common)?;
            let s = scales(&cfg, &guidance)?;
            let model = commands::load_model(&cfg, guidance.checkpoint.as_deref(), seed)?;
            commands::sample(&cfg, &model, s, seed, &out)?;
            eprintln!("latent written to {}", out.display());
        }
        Cmd::Extrapolate { common, guidance, clips, out } => {
            let (cfg, seed) = setup(&common)?;
            let s = scales(&cfg, &guidance)?;
            let model = commands::load_model(&cfg, guidance.checkpoint.as_deref(), seed)?;
            let clips = clips.unwrap_or(cfg.conditions.clips);
            commands::extrapolate_cmd(&cfg, &model, s, clips, seed, &out)?;
            eprintln!("latent of {clips} clip(s) written to {}", out.display());
        }
        Cmd::Ablate { common, axis, out } => {
            let (cfg, seed) = setup(&common)?;
            print!("{}", commands::ablate(&cfg, axis, seed, &out_dir(&out, &cfg))?);
        }
        Cmd::Curate { config, manifest, out } => {
            let cfg = commands::load_config(&config)?;
            let (kept, rejected) = commands::curate(&cfg, &manifest, &out_dir(&out, &cfg))?;
            println!("kept {kept}, rejected {rejected}");
        }
        Cmd::Stats { manifest, out } => print!("{}", commands::stats(&manifest, &out)?),
        Cmd::Metrics(Metrics::Frechet { a, b }) => println!("{}", commands::frechet(&a, &b)?),
        Cmd::Metrics(Metrics::Dyndeg { flows }) => println!("{}", commands::dyndeg(&flows)?),
        Cmd::Gradcheck { seed } => print!("{}", commands::gradcheck(seed)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
