//! Command implementations behind the binary: prepare, train, evaluate,
//! robustness, export. Each command is a pure function of (config, seed,
//! input artifacts) and echoes the resolved config into the output
//! directory.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{
    leave_one_out_split, load_interactions, load_split, save_split, DataError, Side, Split,
    SplitManifest,
};
use crate::eval::{evaluate, robustness_run, EvalError, EvalSet, MetricsReport};
use crate::model::{load_checkpoint, save_checkpoint, ModelError, ModelParams};
use crate::training::{fit, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint {0} does not exist")]
    MissingCheckpoint(String),
}

impl CliError {
    /// 0 success, 2 config error, 3 data error, 4 training abort, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::MissingCheckpoint(_) => 3,
            CliError::Eval(EvalError::Data(_)) => 3,
            CliError::Train(TrainError::Diverged { .. }) => 4,
            CliError::Train(TrainError::Data(_)) => 3,
            _ => 1,
        }
    }
}

/// Load, filter, split, and persist the dataset under `<out>/split`.
pub fn cmd_prepare(config: &RunConfig) -> Result<PathBuf, CliError> {
    let path = config.dataset_path()?;
    let matrix = load_interactions(
        path,
        config.dataset.format,
        config.dataset.min_user_interactions,
        config.dataset.min_item_interactions,
    )?;
    let split = leave_one_out_split(&matrix, config.dataset.split_policy, config.train.seed)?;
    let manifest = SplitManifest {
        seed: config.train.seed,
        policy: config.dataset.split_policy,
        format: config.dataset.format,
        min_user_interactions: config.dataset.min_user_interactions,
        min_item_interactions: config.dataset.min_item_interactions,
        num_users: matrix.num_users(),
        num_items: matrix.num_items(),
        source: path.display().to_string(),
    };
    let dir = config.split_dir();
    save_split(&split, &manifest, &dir)?;
    config.echo()?;
    Ok(dir)
}

fn load_prepared(config: &RunConfig) -> Result<Split, CliError> {
    let (split, _) = load_split(config.split_dir())?;
    Ok(split)
}

/// Train on the prepared split; best checkpoint and a JSON-lines epoch log
/// land in the output directory.
pub fn cmd_train(config: &RunConfig) -> Result<PathBuf, CliError> {
    let split = load_prepared(config)?;
    let out = config.output_dir();
    std::fs::create_dir_all(&out)?;
    let checkpoint = config.checkpoint_path();
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("training-log.jsonl"))?);
    let result = fit(&split, &config.train, Some(&mut log), Some(&checkpoint))?;
    // cover the degenerate run where no epoch improved on the initial params
    if !checkpoint.exists() {
        save_checkpoint(&result.params, &checkpoint)?;
    }
    config.echo()?;
    Ok(checkpoint)
}

fn load_model(checkpoint: &Path) -> Result<ModelParams, CliError> {
    if !checkpoint.exists() {
        return Err(CliError::MissingCheckpoint(checkpoint.display().to_string()));
    }
    Ok(load_checkpoint(checkpoint)?)
}

fn report(config: &RunConfig, metrics: crate::eval::Metrics, level: Option<f64>) -> MetricsReport {
    MetricsReport {
        dataset: config.dataset.name.clone(),
        variant: config.train.variant.to_string(),
        seed: config.train.seed,
        noise_level: level,
        metrics,
    }
}

/// Test-set metrics for a trained checkpoint, written to
/// `<out>/metrics.json` and returned for echoing to standard output.
pub fn cmd_evaluate(config: &RunConfig, checkpoint: &Path) -> Result<MetricsReport, CliError> {
    let split = load_prepared(config)?;
    let params = load_model(checkpoint)?;
    let metrics = evaluate(&params, &split, EvalSet::Test)?;
    let out = report(config, metrics, None);
    let dir = config.output_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&out).expect("serializes"))?;
    config.echo()?;
    Ok(out)
}

/// Noise sweep over the configured levels; one record per level in
/// `<out>/robustness.json`.
pub fn cmd_robustness(config: &RunConfig, checkpoint: &Path) -> Result<Vec<MetricsReport>, CliError> {
    let split = load_prepared(config)?;
    let params = load_model(checkpoint)?;
    let points = robustness_run(&params, &split, &config.eval.noise_levels, config.train.seed)?;
    let reports: Vec<MetricsReport> = points
        .into_iter()
        .map(|p| report(config, p.metrics, Some(p.level)))
        .collect();
    let dir = config.output_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("robustness.json"),
        serde_json::to_string_pretty(&reports).expect("serializes"),
    )?;
    config.echo()?;
    Ok(reports)
}

/// Posterior means and standard deviations for one side as CSV.
pub fn cmd_export(config: &RunConfig, checkpoint: &Path, side: Side) -> Result<PathBuf, CliError> {
    let split = load_prepared(config)?;
    let params = load_model(checkpoint)?;
    let dir = config.output_dir();
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("posteriors-{side}.csv"));
    crate::eval::export_posteriors(&params, &split, side, &path)?;
    config.echo()?;
    Ok(path)
}
