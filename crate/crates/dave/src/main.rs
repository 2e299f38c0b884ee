use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dave::cli::{cmd_evaluate, cmd_export, cmd_prepare, cmd_robustness, cmd_train, CliError};
use dave::config::RunConfig;
use dave::data::Side;
use dave::objectives::Variant;

/// Dual adversarial variational embeddings for top-k recommendation.
#[derive(Parser)]
#[command(name = "dave", version, about)]
struct Cli {
    /// Run configuration file (TOML); defaults apply for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the model variant (dave, dave-adv, dave-aae).
    #[arg(long, global = true)]
    variant: Option<Variant>,

    /// Checkpoint path for evaluate/robustness/export; defaults to
    /// `<out>/model.ckpt`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Comma-separated noise levels for the robustness sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    levels: Option<Vec<f64>>,

    /// Embedding side to export (user or item).
    #[arg(long, global = true)]
    side: Option<Side>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the dataset, filter, split, and persist the split artifacts.
    Prepare,
    /// Train on a prepared split; writes checkpoint and epoch log.
    Train,
    /// Compute test-set HR@k / NDCG@k for a checkpoint.
    Evaluate,
    /// Evaluate under increasing interaction noise.
    Robustness,
    /// Export posterior means and standard deviations as CSV.
    Export,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    if let Some(variant) = cli.variant {
        config.train.variant = variant;
    }
    if let Some(levels) = &cli.levels {
        config.eval.noise_levels = levels.clone();
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = resolve_config(cli)?;
    let checkpoint = cli.checkpoint.clone().unwrap_or_else(|| config.checkpoint_path());
    match cli.command {
        Command::Prepare => {
            let dir = cmd_prepare(&config)?;
            println!("split written to {}", dir.display());
        }
        Command::Train => {
            let path = cmd_train(&config)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::Evaluate => {
            let report = cmd_evaluate(&config, &checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
        }
        Command::Robustness => {
            let reports = cmd_robustness(&config, &checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&reports).expect("serializes"));
        }
        Command::Export => {
            let side = cli.side.unwrap_or(Side::User);
            let path = cmd_export(&config, &checkpoint, side)?;
            println!("posteriors written to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
