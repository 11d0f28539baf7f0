use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use muse_core::config::RunConfig;
use muse_core::pipeline::{self, ModelKind};
use muse_core::Result;

#[derive(Parser)]
#[command(name = "muse", version, about = "Multi-scale knowledge tracing", after_help = RunConfig::help_text())]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides `threads`.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Overrides `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset into `data_dir`.
    Generate,
    /// Train one model on the train split.
    Train {
        /// `local` or `global`.
        #[arg(long, default_value = "local")]
        model: String,
    },
    /// Adversarial fine-tuning of a local checkpoint.
    FinetuneAdv {
        /// Defaults to the latest `local.<step>.ckpt` in the output directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Out-of-fold fusion of a local and a global checkpoint.
    Blend {
        #[arg(long, value_name = "PATH")]
        local: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        global: Option<PathBuf>,
    },
    /// Held-out metrics of one or more checkpoints.
    Evaluate {
        /// Defaults to the latest local and global checkpoints.
        #[arg(long, value_name = "PATH")]
        checkpoint: Vec<PathBuf>,
    },
    /// Score every question row of an interactions file.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        output: PathBuf,
    },
}

fn latest_or(given: Option<PathBuf>, dir: &Path, model: &str) -> Result<PathBuf> {
    match given {
        Some(p) => Ok(p),
        None => pipeline::latest_checkpoint(dir, model),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    let threads = cfg.threads;
    pipeline::with_threads(threads, move || match cli.command {
        Command::Generate => pipeline::generate(&cfg).map(|_| ()),
        Command::Train { model } => {
            let kind = ModelKind::parse(&model)?;
            let prepared = pipeline::load_prepared(&cfg)?;
            let path = pipeline::train(&cfg, kind, &prepared)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::FinetuneAdv { checkpoint } => {
            let ckpt = latest_or(checkpoint, &cfg.out_dir, "local")?;
            pipeline::read_checkpoint(&ckpt)?;
            let prepared = pipeline::load_prepared(&cfg)?;
            let (path, _) = pipeline::finetune_adv(&cfg, &ckpt, &prepared)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Blend { local, global } => {
            let l = latest_or(local, &cfg.out_dir, "local")?;
            let g = latest_or(global, &cfg.out_dir, "global")?;
            pipeline::read_checkpoint(&l)?;
            pipeline::read_checkpoint(&g)?;
            let prepared = pipeline::load_prepared(&cfg)?;
            let out = pipeline::blend(&cfg, &l, &g, &prepared)?;
            print!("{}", out.report);
            Ok(())
        }
        Command::Evaluate { checkpoint } => {
            let ckpts = if checkpoint.is_empty() {
                vec![
                    pipeline::latest_checkpoint(&cfg.out_dir, "local")?,
                    pipeline::latest_checkpoint(&cfg.out_dir, "global")?,
                ]
            } else {
                checkpoint
            };
            for c in &ckpts {
                pipeline::read_checkpoint(c)?;
            }
            let prepared = pipeline::load_prepared(&cfg)?;
            for c in &ckpts {
                let r = pipeline::evaluate(&cfg, c, &prepared)?;
                println!("# {}", c.display());
                print!("{r}");
            }
            Ok(())
        }
        Command::Predict { checkpoint, input, output } => {
            let n = pipeline::predict(&cfg, &checkpoint, &input, &output)?;
            info!("wrote {n} predictions to {}", output.display());
            Ok(())
        }
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MUSE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("muse: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
