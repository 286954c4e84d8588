//! `unitprompt` command-line pipeline: features → quantize → encode →
//! train → eval, plus synthetic data and gradient checking.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use unitprompt::datasets::Split;
use unitprompt::Exec;

use config::{ConfigError, Precision, RunConfig, SEED_ENV};

#[derive(Parser, Debug)]
#[command(name = "unitprompt", version, about = "Prompt-tuned unit language model pipeline")]
struct Cli {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed and UNITPROMPT_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel loops (1 runs sequentially).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Log-mel features from 16 kHz mono wav files.
    Features {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a k-means codebook over feature files.
    Quantize {
        #[arg(long = "features", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn feature files into unit files.
    Encode {
        #[arg(long = "features", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Collapse runs of repeated units.
        #[arg(long)]
        dedup: bool,
    },
    /// Generate the synthetic Markov-chain benchmark.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Background-segment probability.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Prompt-tune on one or more manifests.
    Train {
        #[arg(long = "manifest", num_args = 1..)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        precision: Option<Precision>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        aux_lm_weight: Option<f64>,
    },
    /// Segment- and patient-level metrics for a checkpoint.
    Eval {
        #[arg(long = "manifest", num_args = 1..)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        rho: Option<f64>,
        /// Score the majority-class baseline instead of the checkpoint.
        #[arg(long)]
        baseline: bool,
    },
    /// Finite-difference check of the backbone and prompt gradients.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

impl clap::ValueEnum for Precision {
    fn value_variants<'a>() -> &'a [Self] {
        &[Precision::F32, Precision::F64]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }))
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?} (train, val, test)"))
}

fn setup_threads(threads: Option<usize>) -> Result<Exec> {
    match threads {
        Some(0) => Err(ConfigError("--threads must be >= 1".into()).into()),
        Some(1) => Ok(Exec::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
            Ok(Exec::Parallel)
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(Exec::Sequential),
        None => Ok(Exec::Parallel),
    }
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut cfg = base.resolve(env_seed.as_deref(), cli.seed)?;
    let exec = setup_threads(cli.threads)?;
    let out_or = |o: &Option<PathBuf>, cfg: &RunConfig| o.clone().unwrap_or_else(|| cfg.output_dir.clone());
    match &cli.command {
        Command::Features { inputs, out } => {
            cfg.validate()?;
            commands::features(&cfg, inputs, out)
        }
        Command::Quantize { inputs, k, out } => {
            if let Some(k) = k {
                cfg.quantizer.k = *k;
            }
            cfg.validate()?;
            commands::quantize(&cfg, inputs, out, exec)
        }
        Command::Encode {
            inputs,
            codebook,
            out,
            dedup,
        } => {
            cfg.validate()?;
            commands::encode_cmd(&cfg, inputs, codebook, out, *dedup || cfg.quantizer.dedup, exec)
        }
        Command::Synth { out, noise } => {
            if let Some(n) = noise {
                cfg.synth.noise = *n;
            }
            cfg.validate()?;
            commands::synth(&cfg, &out_or(out, &cfg))
        }
        Command::Train {
            manifests,
            out,
            precision,
            max_epochs,
            aux_lm_weight,
        } => {
            if let Some(p) = precision {
                cfg.precision = *p;
            }
            if let Some(m) = max_epochs {
                cfg.train.max_epochs = *m;
            }
            if let Some(w) = aux_lm_weight {
                cfg.train.aux_lm_weight = *w;
            }
            if !manifests.is_empty() {
                cfg.data.manifests = manifests.clone();
            }
            cfg.validate()?;
            commands::train(&cfg, &cfg.data.manifests, &out_or(out, &cfg), exec)
        }
        Command::Eval {
            manifests,
            checkpoint,
            out,
            split,
            rho,
            baseline,
        } => {
            if let Some(r) = rho {
                cfg.voting.rho = *r;
            }
            if !manifests.is_empty() {
                cfg.data.manifests = manifests.clone();
            }
            cfg.validate()?;
            commands::eval(&cfg, &cfg.data.manifests, checkpoint, &out_or(out, &cfg), *split, *baseline, exec)
        }
        Command::Gradcheck { out, epsilon, tolerance } => {
            if let Some(e) = epsilon {
                cfg.gradcheck.epsilon = *e;
            }
            if let Some(t) = tolerance {
                cfg.gradcheck.tolerance = *t;
            }
            if commands::gradcheck(&cfg, out.as_deref())? {
                Ok(())
            } else {
                Err(anyhow::anyhow!("gradient check failed"))
            }
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>() || matches!(c.downcast_ref::<unitprompt::Error>(), Some(unitprompt::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
