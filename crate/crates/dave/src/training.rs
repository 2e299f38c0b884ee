//! Alternating adversarial training: RMSprop ascent on the discriminators,
//! Adam ascent on encoders, decoders, and predictor, with validation-NDCG
//! early stopping.

use std::collections::HashMap;
use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    interaction_vector, sample_train_negatives, shuffled, DataError, Side, Split,
};
use crate::diffcore::{DenseArray, GradMap, TapeError};
use crate::eval::{evaluate, EvalError, EvalSet};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::objectives::{
    aae_objective, disc_objective, generator_objective, total_objective, AaePhase, BatchLosses,
    LossWeights, ObjectiveError, PredictionBatch, Variant,
};
use crate::rng::{stream, TAG_INIT, TAG_NEGATIVES, TAG_SHUFFLE, TAG_TRAIN};

/// Consecutive non-finite update attempts tolerated before aborting.
const MAX_CONSECUTIVE_SKIPS: usize = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training aborted at epoch {epoch}: {skips} consecutive non-finite updates")]
    Diverged { epoch: usize, skips: usize },
    #[error("split has no train interactions")]
    EmptyTrainSet,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Optimizers (ascent convention: parameters move along the gradient).

/// Adam with bias correction; one `t` tick per `ascend` call.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn ascend(&mut self, params: &mut ModelParams, grads: &GradMap) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        params.visit_mut(|name, tensor| {
            let Some(grad) = grads.get(name) else { return };
            let values = tensor.values_mut();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; values.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; values.len()]);
            for i in 0..values.len() {
                let g = grad.values()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] += self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        });
    }
}

/// RMSprop with a running second-moment cache.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    cache: HashMap<String, Vec<f64>>,
}

impl RmsProp {
    pub fn new(learning_rate: f64) -> Self {
        RmsProp { learning_rate, decay: 0.9, epsilon: 1e-8, cache: HashMap::new() }
    }

    pub fn ascend(&mut self, params: &mut ModelParams, grads: &GradMap) {
        params.visit_mut(|name, tensor| {
            let Some(grad) = grads.get(name) else { return };
            let values = tensor.values_mut();
            let c = self
                .cache
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; values.len()]);
            for i in 0..values.len() {
                let g = grad.values()[i];
                c[i] = self.decay * c[i] + (1.0 - self.decay) * g * g;
                values[i] += self.learning_rate * g / (c[i].sqrt() + self.epsilon);
            }
        });
    }
}

// ---------------------------------------------------------------------------
// Configuration.

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub negative_ratio: usize,
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Layer-width overrides; None keeps the model defaults.
    pub encoder_hidden: Option<Vec<usize>>,
    pub decoder_hidden: Option<Vec<usize>>,
    pub discriminator_hidden: Option<Vec<usize>>,
    pub predictor_hidden: Option<Vec<usize>>,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Dave,
            batch_size: 256,
            negative_ratio: 4,
            embedding_dim: 64,
            learning_rate: 1e-4,
            max_epochs: 200,
            patience: 10,
            seed: 42,
            encoder_hidden: None,
            decoder_hidden: None,
            discriminator_hidden: None,
            predictor_hidden: None,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, num_users: usize, num_items: usize) -> ModelConfig {
        let mut mc = ModelConfig::new(self.embedding_dim, num_users, num_items);
        if let Some(h) = &self.encoder_hidden {
            mc.encoder_hidden = h.clone();
        }
        if let Some(h) = &self.decoder_hidden {
            mc.decoder_hidden = h.clone();
        }
        if let Some(h) = &self.discriminator_hidden {
            mc.discriminator_hidden = h.clone();
        }
        if let Some(h) = &self.predictor_hidden {
            mc.predictor_hidden = h.clone();
        }
        mc
    }
}

// ---------------------------------------------------------------------------
// Batch assembly.

/// All train positives plus `ratio` fresh negatives per positive, drawn
/// deterministically from the epoch's negative-sampling stream.
pub fn epoch_triples(
    split: &Split,
    ratio: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<(u32, u32, f64)>, TrainError> {
    let mut triples = Vec::new();
    for u in 0..split.num_users() {
        let positives = split.train.user_items(u);
        if positives.is_empty() {
            continue;
        }
        let mut rng = stream(seed, &[TAG_NEGATIVES, epoch as u64, u as u64]);
        let negatives = sample_train_negatives(split, u, ratio, &mut rng)?;
        triples.extend(positives.iter().map(|&v| (u as u32, v, 1.0)));
        triples.extend(negatives.items.iter().map(|&v| (u as u32, v, 0.0)));
    }
    if triples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    Ok(triples)
}

/// Gather the distinct users and items a chunk of triples touches, so each
/// entity contributes exactly once to the VAE terms.
pub fn assemble_batch(
    split: &Split,
    triples: &[(u32, u32, f64)],
) -> Result<PredictionBatch, TrainError> {
    let mut user_index: HashMap<u32, usize> = HashMap::new();
    let mut item_index: HashMap<u32, usize> = HashMap::new();
    let mut user_rows = Vec::new();
    let mut item_rows = Vec::new();
    let mut local = Vec::with_capacity(triples.len());
    for &(u, v, label) in triples {
        let ui = match user_index.get(&u) {
            Some(&i) => i,
            None => {
                user_rows.push(interaction_vector(split, Side::User, u as usize)?);
                user_index.insert(u, user_rows.len() - 1);
                user_rows.len() - 1
            }
        };
        let vi = match item_index.get(&v) {
            Some(&i) => i,
            None => {
                item_rows.push(interaction_vector(split, Side::Item, v as usize)?);
                item_index.insert(v, item_rows.len() - 1);
                item_rows.len() - 1
            }
        };
        local.push((ui, vi, label));
    }
    Ok(PredictionBatch {
        user_vectors: DenseArray::stack_rows(&user_rows).expect("uniform user rows"),
        item_vectors: DenseArray::stack_rows(&item_rows).expect("uniform item rows"),
        triples: local,
    })
}

fn rows_as_vectors(matrix: &DenseArray) -> Vec<DenseArray> {
    (0..matrix.shape()[0])
        .map(|i| DenseArray::vector(matrix.row(i).to_vec()).expect("finite row"))
        .collect()
}

// ---------------------------------------------------------------------------
// Steps and epochs.

pub struct Optimizers {
    pub disc_user: RmsProp,
    pub disc_item: RmsProp,
    pub generator: Adam,
}

impl Optimizers {
    pub fn new(learning_rate: f64) -> Self {
        Optimizers {
            disc_user: RmsProp::new(learning_rate),
            disc_item: RmsProp::new(learning_rate),
            generator: Adam::new(learning_rate),
        }
    }
}

pub struct StepOutcome {
    pub losses: BatchLosses,
    /// Updates dropped in this step because an objective went non-finite.
    pub skipped_updates: usize,
}

/// Treat a numeric blow-up as a skipped update; propagate anything else.
fn finite_or_skip<T>(result: Result<T, ObjectiveError>) -> Result<Option<T>, TrainError> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(ObjectiveError::Tape(TapeError::NonFinite { .. })) => Ok(None),
        Err(e) => Err(TrainError::Objective(e)),
    }
}

/// One alternating step: discriminators first (skipped entirely for the
/// closed-form variant), then the joint generator update.
pub fn train_step(
    params: &mut ModelParams,
    optimizers: &mut Optimizers,
    variant: Variant,
    weights: &LossWeights,
    batch: &PredictionBatch,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome, TrainError> {
    let mut losses = BatchLosses::default();
    let mut skipped = 0;

    if variant != Variant::DaveAdv {
        let user_vectors = rows_as_vectors(&batch.user_vectors);
        let item_vectors = rows_as_vectors(&batch.item_vectors);
        for (side, vectors, opt) in [
            (Side::User, &user_vectors, &mut optimizers.disc_user),
            (Side::Item, &item_vectors, &mut optimizers.disc_item),
        ] {
            let result = match variant {
                Variant::Dave => disc_objective(params, side, vectors, rng),
                Variant::DaveAae => aae_objective(params, side, vectors, rng, AaePhase::Discriminator)
                    .map(|(obj, _)| obj),
                Variant::DaveAdv => unreachable!(),
            };
            match finite_or_skip(result)? {
                Some(obj) => {
                    opt.ascend(params, &obj.grads);
                    match side {
                        Side::User => losses.disc_user = obj.value,
                        Side::Item => losses.disc_item = obj.value,
                    }
                }
                None => skipped += 1,
            }
        }
    }

    match finite_or_skip(generator_objective(params, batch, rng, variant, weights))? {
        Some(step) => {
            optimizers.generator.ascend(params, &step.objective.grads);
            losses.vae_user = step.vae_user.objective;
            losses.recon_user = step.vae_user.reconstruction;
            losses.reg_user = step.vae_user.regularizer;
            losses.vae_item = step.vae_item.objective;
            losses.recon_item = step.vae_item.reconstruction;
            losses.reg_item = step.vae_item.regularizer;
            losses.prediction = step.prediction;
        }
        None => skipped += 1,
    }

    Ok(StepOutcome { losses, skipped_updates: skipped })
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    pub losses: BatchLosses,
    pub objective: f64,
    pub validation_ndcg10: f64,
    pub improved: bool,
}

pub struct FitResult {
    /// Parameters from the best validation epoch.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_ndcg10: f64,
    pub history: Vec<EpochRecord>,
}

/// Full training run with early stopping on validation NDCG@10. Epoch
/// records are appended to `log` as JSON lines when given; when `checkpoint`
/// is given the best parameters are persisted on every improvement, so an
/// abort still leaves the last good checkpoint on disk.
pub fn fit(
    split: &Split,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    checkpoint: Option<&std::path::Path>,
) -> Result<FitResult, TrainError> {
    let mc = config.model_config(split.num_users(), split.num_items());
    let mut params = init_params(&mc, &mut stream(config.seed, &[TAG_INIT]));
    let mut optimizers = Optimizers::new(config.learning_rate);

    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut stale_epochs = 0;

    for epoch in 0..config.max_epochs {
        let triples = epoch_triples(split, config.negative_ratio, config.seed, epoch)?;
        let triples = shuffled(&triples, &mut stream(config.seed, &[TAG_SHUFFLE, epoch as u64]));

        let mut epoch_losses = BatchLosses::default();
        let mut batches = 0;
        let mut consecutive_skips = 0;
        for (batch_idx, chunk) in triples.chunks(config.batch_size).enumerate() {
            let batch = assemble_batch(split, chunk)?;
            let mut rng = stream(config.seed, &[TAG_TRAIN, epoch as u64, batch_idx as u64]);
            let outcome =
                train_step(&mut params, &mut optimizers, config.variant, &config.loss_weights, &batch, &mut rng)?;
            if outcome.skipped_updates > 0 {
                consecutive_skips += outcome.skipped_updates;
                if consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(TrainError::Diverged { epoch, skips: consecutive_skips });
                }
            } else {
                consecutive_skips = 0;
            }
            accumulate(&mut epoch_losses, &outcome.losses);
            batches += 1;
        }
        scale(&mut epoch_losses, 1.0 / batches as f64);

        let metrics = evaluate(&params, split, EvalSet::Validation)?;
        let ndcg10 = metrics.ndcg[&10];
        let improved = ndcg10 > best_ndcg;
        if improved {
            best_ndcg = ndcg10;
            best_epoch = epoch;
            best_params = params.clone();
            if let Some(path) = checkpoint {
                crate::model::save_checkpoint(&best_params, path)
                    .map_err(|e| TrainError::Objective(ObjectiveError::Model(e)))?;
            }
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
        }

        let record = EpochRecord {
            epoch,
            batches,
            objective: total_objective(&epoch_losses),
            losses: epoch_losses,
            validation_ndcg10: ndcg10,
            improved,
        };
        if let Some(log) = log.as_deref_mut() {
            serde_json::to_writer(&mut *log, &record).map_err(std::io::Error::other)?;
            writeln!(log)?;
        }
        history.push(record);

        if stale_epochs >= config.patience {
            break;
        }
    }

    Ok(FitResult { params: best_params, best_epoch, best_ndcg10: best_ndcg, history })
}

fn accumulate(into: &mut BatchLosses, from: &BatchLosses) {
    into.disc_user += from.disc_user;
    into.disc_item += from.disc_item;
    into.vae_user += from.vae_user;
    into.vae_item += from.vae_item;
    into.prediction += from.prediction;
    into.recon_user += from.recon_user;
    into.reg_user += from.reg_user;
    into.recon_item += from.recon_item;
    into.reg_item += from.reg_item;
}

fn scale(losses: &mut BatchLosses, factor: f64) {
    losses.disc_user *= factor;
    losses.disc_item *= factor;
    losses.vae_user *= factor;
    losses.vae_item *= factor;
    losses.prediction *= factor;
    losses.recon_user *= factor;
    losses.reg_user *= factor;
    losses.recon_item *= factor;
    losses.reg_item *= factor;
}
