//! `svs`: corpus generation, training, synthesis and evaluation.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
//! configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "svs", version, about = "Score-to-acoustic-feature singing voice synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML file with run settings
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set total_steps=500` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic corpus with the oracle singer
    GenData {
        #[arg(long)]
        songs: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Corpus seed (overrides the config `seed`)
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train on the training split of a corpus
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Step budget (overrides the config `total_steps`)
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from this checkpoint
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Synthesize features for a score with predicted durations
    Synth {
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Lexicon file; the built-in lexicon by default
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Compute the objective metric report
    Eval {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Corpus to synthesize and score (requires --checkpoint)
        #[arg(long, conflicts_with = "pair", requires = "checkpoint")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Predicted and reference feature files (repeatable)
        #[arg(long, num_args = 2, value_names = ["PRED", "GT"], required_unless_present = "manifest")]
        pair: Vec<PathBuf>,
        /// Lexicon for reading token sidecars of --pair files
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SplitArg {
    Train,
    Test,
    All,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { songs, out, seed, config } => {
            let mut cfg = config::RunConfig::load(config.config.as_deref(), &config.overrides)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            commands::gen_data(&cfg, songs, &out)
        }
        Command::Train {
            manifest,
            run_dir,
            seed,
            steps,
            resume,
            config,
        } => {
            let mut cfg = config::RunConfig::load(config.config.as_deref(), &config.overrides)?;
            if let Some(m) = manifest {
                cfg.manifest = Some(m);
            }
            if let Some(d) = run_dir {
                cfg.run_dir = d;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.total_steps = s;
            }
            commands::train(cfg, resume.as_deref())
        }
        Command::Synth {
            score,
            checkpoint,
            out,
            lexicon,
        } => commands::synth(&score, &checkpoint, &out, lexicon.as_deref()),
        Command::Eval {
            out,
            manifest,
            checkpoint,
            split,
            pair,
            lexicon,
        } => match (manifest, checkpoint) {
            (Some(m), Some(c)) => commands::eval_model(&m, &c, split, &out),
            (None, None) => commands::eval_pairs(&pair, lexicon.as_deref(), &out),
            (None, Some(_)) => Err(UsageError("--checkpoint needs --manifest".into()).into()),
            (Some(_), None) => unreachable!("clap enforces --checkpoint"),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
