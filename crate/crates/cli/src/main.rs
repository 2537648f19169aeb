use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sarcse_cli::{
    cmd_ablate, cmd_build_vocab, cmd_embed, cmd_eval, cmd_sweep_theta, cmd_train, parse_thetas, resolve_config, resume_config,
    CliError, CliResult, DEFAULT_THETAS, EXIT_USAGE,
};

#[derive(Parser)]
#[command(name = "sarcse", version, about = "Self-adaptive reconstruction contrastive sentence embeddings")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build vocabulary and token frequency files from a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        /// Same as `--set min_count=N`.
        #[arg(long)]
        min_count: Option<usize>,
    },
    /// Train a model, keeping the checkpoint with the best dev Spearman.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a pairs file: Spearman, alignment, uniformity, density.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Also write per-token reconstruction losses.
        #[arg(long)]
        token_report: bool,
    },
    /// Write sentence embeddings, one line per input sentence.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sentences: PathBuf,
    },
    /// Train full, no_sal and no_sal_no_decoder with one seed.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Train once per weight floor value.
    SweepTheta {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Comma-separated values (default 0,0.1,...,0.6).
        #[arg(long)]
        values: Option<String>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let out = cli.out.as_path();
    match cli.command {
        Command::BuildVocab { corpus, min_count } => {
            let mut set = cli.set.clone();
            if let Some(n) = min_count {
                set.push(format!("min_count={n}"));
            }
            let cfg = resolve_config(cli.config.as_deref(), &set, cli.seed)?;
            cmd_build_vocab(&cfg, &corpus, out)
        }
        Command::Train { corpus, dev, resume } => {
            let cfg = match (&resume, &cli.config) {
                (Some(_), Some(_)) => {
                    return Err(CliError::Usage(
                        "--resume takes its config from the checkpoint; use --set to change keys".into(),
                    ))
                }
                (Some(r), None) => resume_config(r, &cli.set, cli.seed)?,
                (None, _) => resolve_config(cli.config.as_deref(), &cli.set, cli.seed)?,
            };
            let outcome = cmd_train(&cfg, &corpus, &dev, out, resume.as_deref())?;
            match outcome.best_dev_spearman {
                Some(r) => println!("best dev spearman {r:.4}"),
                None => println!("no dev spearman recorded"),
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            pairs,
            token_report,
        } => {
            if cli.config.is_some() || cli.seed.is_some() {
                return Err(CliError::Usage(
                    "eval uses the checkpoint's config; only --set overrides apply".into(),
                ));
            }
            let report = cmd_eval(&cli.set, &checkpoint, &pairs, out, token_report)?;
            print!("{}", report.summary());
            Ok(())
        }
        Command::Embed { checkpoint, sentences } => {
            let n = cmd_embed(&checkpoint, &sentences, out)?;
            println!("embedded {n} sentences");
            Ok(())
        }
        Command::Ablate { corpus, dev, test } => {
            let cfg = resolve_config(cli.config.as_deref(), &cli.set, cli.seed)?;
            let rows = cmd_ablate(&cfg, &corpus, &dev, &test, out)?;
            print!("{}", sarcse_cli::variant_table("variant", &rows));
            Ok(())
        }
        Command::SweepTheta {
            corpus,
            dev,
            test,
            values,
        } => {
            let cfg = resolve_config(cli.config.as_deref(), &cli.set, cli.seed)?;
            let thetas = match values {
                Some(v) => parse_thetas(&v)?,
                None => DEFAULT_THETAS.to_vec(),
            };
            let rows = cmd_sweep_theta(&cfg, &thetas, &corpus, &dev, &test, out)?;
            print!("{}", sarcse_cli::variant_table("theta", &rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
