use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drfuse::cli::{self, ExperimentConfig};
use drfuse::data::SyntheticConfig;

#[derive(Parser)]
#[command(
    name = "drfuse",
    version,
    about = "Disentangled multimodal fusion experiments"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its manifest.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Synthetic preset: default, mimic-like or smoke.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write its checkpoint and log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the checkpoint inside `--out`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only score samples that carry an image.
        #[arg(long)]
        matched_only: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and compare the ablation variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the unimodal and concatenation baselines next to DrFuse.
    Baselines {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cmd: Command) -> drfuse::Result<()> {
    match cmd {
        Command::Generate {
            config,
            preset,
            out,
            seed,
        } => {
            let mut cfg = match (config, preset) {
                (Some(path), _) => ExperimentConfig::load(&path)?,
                (None, name) => {
                    let mut cfg = ExperimentConfig::default();
                    cfg.dataset.synthetic = Some(SyntheticConfig::preset(
                        name.as_deref().unwrap_or("default"),
                    )?);
                    cfg
                }
            };
            if let (Some(seed), Some(syn)) = (seed, cfg.dataset.synthetic.as_mut()) {
                syn.seed = seed;
            }
            let written = cli::cmd_generate(&cfg, &out)?;
            println!("wrote {}", written.manifest.display());
        }
        Command::Train { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?.with_seed(seed);
            let ckpt = cli::cmd_train(&cfg, &out)?;
            println!("wrote {}", ckpt.display());
        }
        Command::Evaluate {
            config,
            out,
            checkpoint,
            matched_only,
            seed,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            let ckpt = checkpoint.unwrap_or_else(|| out.join(cli::CHECKPOINT_FILE));
            let res = cli::cmd_evaluate(&cfg, &ckpt, &out, matched_only)?;
            let r = &res.report;
            println!(
                "{}: macro PRAUC {:.4} [{:.4}, {:.4}] over {} samples",
                r.label, r.macro_prauc, r.ci_lo, r.ci_hi, r.n_samples
            );
        }
        Command::Ablate { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?.with_seed(seed);
            for row in cli::cmd_ablate(&cfg, &out)? {
                println!(
                    "{:<18} matched {:.4}  full {:.4}",
                    row.name, row.matched.macro_prauc, row.full.macro_prauc
                );
            }
        }
        Command::Baselines { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?.with_seed(seed);
            for row in cli::cmd_baselines(&cfg, &out)? {
                println!(
                    "{:<10} matched {:.4}  full {:.4}",
                    row.kind.name(),
                    row.matched.macro_prauc,
                    row.full.macro_prauc
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
