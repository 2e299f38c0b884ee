//! Training objectives: per-side discriminator objectives, adversarially
//! regularized VAE objectives, the prediction log-likelihood, the closed-form
//! Gaussian KL used by the `dave-adv` variant, and the aggregated-posterior
//! objective used by `dave-aae`.
//!
//! Every function returns the value of a quantity to MAXIMIZE together with
//! its gradients. The sign flip for the descent-style optimizers happens in
//! the optimizer step, nowhere else.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Side;
use crate::diffcore::{DenseArray, GradMap, NodeId, Tape, TapeError};
use crate::model::{
    self, decoder_logits_graph, discriminator_graph, encoder_graph, predictor_logits_graph,
    reparam_graph, DiscriminatorParams, GaussianPosterior, ModelParams,
};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("density is not positive at x = {0}")]
    ZeroDensity(f64),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Dave,
    DaveAdv,
    DaveAae,
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dave" => Ok(Variant::Dave),
            "dave-adv" => Ok(Variant::DaveAdv),
            "dave-aae" => Ok(Variant::DaveAae),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Dave => write!(f, "dave"),
            Variant::DaveAdv => write!(f, "dave-adv"),
            Variant::DaveAae => write!(f, "dave-aae"),
        }
    }
}

/// A scalar objective (maximize convention) and its gradients.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub grads: GradMap,
}

/// Reconstruction / regularizer decomposition of one VAE-side objective.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct VaeTerms {
    pub objective: f64,
    pub reconstruction: f64,
    pub regularizer: f64,
}

/// Per-batch mean loss components logged at every step.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct BatchLosses {
    pub disc_user: f64,
    pub disc_item: f64,
    pub vae_user: f64,
    pub vae_item: f64,
    pub prediction: f64,
    pub recon_user: f64,
    pub reg_user: f64,
    pub recon_item: f64,
    pub reg_item: f64,
}

/// Sum of the five components; reporting only, optimization is split per the
/// alternating phases.
pub fn total_objective(losses: &BatchLosses) -> f64 {
    losses.disc_user + losses.disc_item + losses.vae_user + losses.vae_item + losses.prediction
}

fn side_prefix(side: Side, net: &str) -> String {
    match side {
        Side::User => format!("user_{net}"),
        Side::Item => format!("item_{net}"),
    }
}

/// Draw one reparameterized embedding per data row, treating the encoder as a
/// constant. Returns a `[B, d]` matrix.
pub fn sample_embeddings(
    params: &ModelParams,
    side: Side,
    data_rows: &DenseArray,
    rng: &mut ChaCha8Rng,
) -> Result<DenseArray, ObjectiveError> {
    let d = params.config.embedding_dim;
    let batch = data_rows.shape()[0];
    let (mean, logvar) = model::encode_batch(params, side, data_rows)?;
    let mut values = Vec::with_capacity(batch * d);
    for b in 0..batch {
        let post = GaussianPosterior {
            mean: DenseArray::vector(mean.row(b).to_vec()).expect("finite"),
            log_variance: DenseArray::vector(logvar.row(b).to_vec()).expect("finite"),
        };
        let eps = model::standard_normal(d, rng);
        values.extend_from_slice(model::reparameterize(&post, &eps).values());
    }
    Ok(DenseArray::matrix(batch, d, values).expect("finite embeddings"))
}

fn stack(batch: &[DenseArray]) -> Result<DenseArray, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    Ok(DenseArray::stack_rows(batch).expect("aligned batch rows"))
}

fn prior_rows(d: usize, batch: usize, rng: &mut ChaCha8Rng) -> DenseArray {
    let mut values = Vec::with_capacity(batch * d);
    for _ in 0..batch {
        values.extend_from_slice(model::sample_prior(d, rng).values());
    }
    DenseArray::matrix(batch, d, values).expect("finite priors")
}

/// mean(log sigma(D(prior))) + mean(log(1 - sigma(D(fake)))) for a fixed set
/// of samples, with only the discriminator trainable.
pub fn disc_objective_from_samples(
    disc: &DiscriminatorParams,
    prefix: &str,
    priors: &DenseArray,
    fakes: &DenseArray,
) -> Result<Objective, ObjectiveError> {
    let mut tape = Tape::new();
    let prior_node = tape.constant(priors.clone());
    let fake_node = tape.constant(fakes.clone());
    let real_logits = discriminator_graph(&mut tape, disc, prefix, true, prior_node)?;
    let fake_logits = discriminator_graph(&mut tape, disc, prefix, true, fake_node)?;
    let real_term = tape.log_sigmoid(real_logits)?;
    // log(1 - sigma(x)) = log sigma(-x)
    let fake_neg = tape.neg(fake_logits)?;
    let fake_term = tape.log_sigmoid(fake_neg)?;
    let real_mean = tape.mean(real_term)?;
    let fake_mean = tape.mean(fake_term)?;
    let obj = tape.add(real_mean, fake_mean)?;
    let grads = tape.backward(obj)?;
    Ok(Objective { value: tape.scalar_value(obj), grads })
}

/// Discriminator objective for one side: prior samples as real, fresh
/// reparameterized posterior samples as fake. No gradient reaches the
/// encoder.
pub fn disc_objective(
    params: &ModelParams,
    side: Side,
    data_vectors: &[DenseArray],
    rng: &mut ChaCha8Rng,
) -> Result<Objective, ObjectiveError> {
    let rows = stack(data_vectors)?;
    let d = params.config.embedding_dim;
    let fakes = sample_embeddings(params, side, &rows, rng)?;
    let priors = prior_rows(d, data_vectors.len(), rng);
    disc_objective_from_samples(
        params.discriminator(side),
        &side_prefix(side, "discriminator"),
        &priors,
        &fakes,
    )
}

/// Optimal-discriminator oracle: log p(x) - log q(x).
pub fn optimal_disc_value(
    prior_density: impl Fn(f64) -> f64,
    posterior_density: impl Fn(f64) -> f64,
    x: f64,
) -> Result<f64, ObjectiveError> {
    let p = prior_density(x);
    let q = posterior_density(x);
    if p <= 0.0 || q <= 0.0 {
        return Err(ObjectiveError::ZeroDensity(x));
    }
    Ok(p.ln() - q.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    /// Current discriminator logit at the sampled embedding; gradients pass
    /// through the discriminator input but its parameters stay fixed.
    Adversarial,
    /// Negated closed-form Gaussian KL to the standard-normal prior.
    ClosedFormKl,
}

/// Per-row Bernoulli log-likelihood of `data` under decoder logits, summed
/// over entries and averaged over the batch.
fn recon_ll_node(
    tape: &mut Tape,
    logits: NodeId,
    data: NodeId,
    ones_minus_data: NodeId,
    batch: usize,
) -> Result<NodeId, TapeError> {
    let pos_ll = tape.log_sigmoid(logits)?;
    let pos = tape.mul(data, pos_ll)?;
    let neg_logits = tape.neg(logits)?;
    let neg_ll = tape.log_sigmoid(neg_logits)?;
    let neg = tape.mul(ones_minus_data, neg_ll)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both)?;
    tape.scale(total, 1.0 / batch as f64)
}

/// Batch-mean closed-form KL node: 0.5 sum(mu^2 + exp(lv) - lv - 1) / B.
fn kl_node(tape: &mut Tape, mean: NodeId, logvar: NodeId, batch: usize) -> Result<NodeId, TapeError> {
    let mu_sq = tape.mul(mean, mean)?;
    let var = tape.exp(logvar)?;
    let neg_lv = tape.neg(logvar)?;
    let a = tape.add(mu_sq, var)?;
    let b = tape.add(a, neg_lv)?;
    let c = tape.add_scalar(b, -1.0)?;
    let s = tape.sum(c)?;
    tape.scale(s, 0.5 / batch as f64)
}

struct VaeGraph {
    embedding: NodeId,
    recon: NodeId,
    reg: NodeId,
    objective: NodeId,
}

/// Shared builder for one side's VAE objective. `epsilons` is a `[B, d]`
/// constant; with `point_estimate` the embedding is the posterior mean and
/// the regularizer is the aggregated-posterior fooling term.
fn vae_graph(
    tape: &mut Tape,
    params: &ModelParams,
    side: Side,
    data_rows: &DenseArray,
    epsilons: &DenseArray,
    reg: Regularizer,
    point_estimate: bool,
) -> Result<VaeGraph, ObjectiveError> {
    let batch = data_rows.shape()[0];
    let data = tape.constant(data_rows.clone());
    let ones_minus: Vec<f64> = data_rows.values().iter().map(|&x| 1.0 - x).collect();
    let ones_minus = tape.constant(
        DenseArray::from_vec(data_rows.shape().to_vec(), ones_minus).expect("finite"),
    );

    let (mean, logvar) =
        encoder_graph(tape, params.encoder(side), &side_prefix(side, "encoder"), true, data)?;
    let embedding = if point_estimate {
        mean
    } else {
        let eps = tape.constant(epsilons.clone());
        reparam_graph(tape, mean, logvar, eps)?
    };

    let logits = decoder_logits_graph(
        tape,
        params.decoder(side),
        &side_prefix(side, "decoder"),
        true,
        embedding,
    )?;
    let recon = recon_ll_node(tape, logits, data, ones_minus, batch)?;

    let reg_node = match (reg, point_estimate) {
        (Regularizer::Adversarial, false) => {
            let d_logits = discriminator_graph(
                tape,
                params.discriminator(side),
                &side_prefix(side, "discriminator"),
                false,
                embedding,
            )?;
            tape.mean(d_logits)?
        }
        (Regularizer::Adversarial, true) => {
            // aggregated-posterior fooling term: log sigma(D(embedding))
            let d_logits = discriminator_graph(
                tape,
                params.discriminator(side),
                &side_prefix(side, "discriminator"),
                false,
                embedding,
            )?;
            let fool = tape.log_sigmoid(d_logits)?;
            tape.mean(fool)?
        }
        (Regularizer::ClosedFormKl, _) => {
            let kl = kl_node(tape, mean, logvar, batch)?;
            tape.neg(kl)?
        }
    };
    let objective = tape.add(recon, reg_node)?;
    Ok(VaeGraph { embedding, recon, reg: reg_node, objective })
}

/// Adversarially regularized (or closed-form-KL) VAE objective for one side.
/// Discriminator parameters are fixed for this call.
pub fn vae_objective(
    params: &ModelParams,
    side: Side,
    data_vectors: &[DenseArray],
    rng: &mut ChaCha8Rng,
    reg: Regularizer,
) -> Result<(Objective, VaeTerms), ObjectiveError> {
    let rows = stack(data_vectors)?;
    let d = params.config.embedding_dim;
    let eps = prior_rows(d, data_vectors.len(), rng);
    let mut tape = Tape::new();
    let g = vae_graph(&mut tape, params, side, &rows, &eps, reg, false)?;
    let grads = tape.backward(g.objective)?;
    let terms = VaeTerms {
        objective: tape.scalar_value(g.objective),
        reconstruction: tape.scalar_value(g.recon),
        regularizer: tape.scalar_value(g.reg),
    };
    Ok((Objective { value: terms.objective, grads }, terms))
}

/// Aggregated-posterior (point-estimate encoder) objective for the
/// `dave-aae` variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AaePhase {
    /// Train the discriminator on priors vs the batch of point embeddings.
    Discriminator,
    /// Train encoder + decoder on reconstruction plus the fooling term.
    Generator,
}

pub fn aae_objective(
    params: &ModelParams,
    side: Side,
    data_vectors: &[DenseArray],
    rng: &mut ChaCha8Rng,
    phase: AaePhase,
) -> Result<(Objective, VaeTerms), ObjectiveError> {
    let rows = stack(data_vectors)?;
    let d = params.config.embedding_dim;
    match phase {
        AaePhase::Discriminator => {
            let (mean, _) = model::encode_batch(params, side, &rows)?;
            let priors = prior_rows(d, data_vectors.len(), rng);
            let obj = disc_objective_from_samples(
                params.discriminator(side),
                &side_prefix(side, "discriminator"),
                &priors,
                &mean,
            )?;
            let value = obj.value;
            Ok((obj, VaeTerms { objective: value, ..Default::default() }))
        }
        AaePhase::Generator => {
            let eps = DenseArray::zeros(vec![data_vectors.len(), d]);
            let mut tape = Tape::new();
            let g = vae_graph(&mut tape, params, side, &rows, &eps, Regularizer::Adversarial, true)?;
            let grads = tape.backward(g.objective)?;
            let terms = VaeTerms {
                objective: tape.scalar_value(g.objective),
                reconstruction: tape.scalar_value(g.recon),
                regularizer: tape.scalar_value(g.reg),
            };
            Ok((Objective { value: terms.objective, grads }, terms))
        }
    }
}

/// One training batch for the predictor: interaction vectors of the distinct
/// users and items touched by the batch, plus (user index, item index, label)
/// triples into those lists.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    pub user_vectors: DenseArray,
    pub item_vectors: DenseArray,
    pub triples: Vec<(usize, usize, f64)>,
}

fn prediction_ll_node(
    tape: &mut Tape,
    params: &ModelParams,
    user_embs: NodeId,
    item_embs: NodeId,
    triples: &[(usize, usize, f64)],
) -> Result<NodeId, TapeError> {
    let user_idx: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let item_idx: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let labels: Vec<f64> = triples.iter().map(|t| t.2).collect();
    let t_count = triples.len();

    let u = tape.gather_rows(user_embs, user_idx)?;
    let v = tape.gather_rows(item_embs, item_idx)?;
    let logits = predictor_logits_graph(tape, &params.predictor, "predictor", true, u, v)?;
    let label_node =
        tape.constant(DenseArray::matrix(t_count, 1, labels.clone()).expect("finite labels"));
    let inv_labels = tape.constant(
        DenseArray::matrix(t_count, 1, labels.iter().map(|&l| 1.0 - l).collect())
            .expect("finite labels"),
    );
    recon_ll_node(tape, logits, label_node, inv_labels, t_count)
}

/// Prediction log-likelihood with embeddings drawn via reparameterization;
/// gradients reach the predictor and, through the embeddings, both encoders.
pub fn prediction_objective(
    params: &ModelParams,
    batch: &PredictionBatch,
    rng: &mut ChaCha8Rng,
) -> Result<Objective, ObjectiveError> {
    if batch.triples.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let d = params.config.embedding_dim;
    let eps_u = prior_rows(d, batch.user_vectors.shape()[0], rng);
    let eps_v = prior_rows(d, batch.item_vectors.shape()[0], rng);

    let mut tape = Tape::new();
    let build_emb = |tape: &mut Tape, side: Side, rows: &DenseArray, eps: &DenseArray| {
        let data = tape.constant(rows.clone());
        let (mean, logvar) =
            encoder_graph(tape, params.encoder(side), &side_prefix(side, "encoder"), true, data)?;
        let eps = tape.constant(eps.clone());
        reparam_graph(tape, mean, logvar, eps)
    };
    let user_embs = build_emb(&mut tape, Side::User, &batch.user_vectors, &eps_u)?;
    let item_embs = build_emb(&mut tape, Side::Item, &batch.item_vectors, &eps_v)?;
    let ll = prediction_ll_node(&mut tape, params, user_embs, item_embs, &batch.triples)?;
    let grads = tape.backward(ll)?;
    Ok(Objective { value: tape.scalar_value(ll), grads })
}

/// Closed-form KL of a diagonal Gaussian posterior to the standard-normal
/// prior: 0.5 sum(mu^2 + sigma^2 - log sigma^2 - 1).
pub fn closed_form_kl(posterior: &GaussianPosterior) -> f64 {
    posterior
        .mean
        .values()
        .iter()
        .zip(posterior.log_variance.values())
        .map(|(&mu, &lv)| 0.5 * (mu * mu + lv.exp() - lv - 1.0))
        .sum()
}

/// Tape-route KL with gradients w.r.t. mean and log-variance; the dual route
/// to `closed_form_kl` for gradient checking.
pub fn closed_form_kl_grad(
    posterior: &GaussianPosterior,
) -> Result<(f64, DenseArray, DenseArray), ObjectiveError> {
    let mut tape = Tape::new();
    let mean = tape.input("mean", posterior.mean.clone());
    let logvar = tape.input("logvar", posterior.log_variance.clone());
    let kl = kl_node(&mut tape, mean, logvar, 1)?;
    let mut grads = tape.backward(kl)?;
    Ok((
        tape.scalar_value(kl),
        grads.remove("mean").expect("mean gradient"),
        grads.remove("logvar").expect("logvar gradient"),
    ))
}

/// Loss weights for the generator phase; the paper's objective sums the
/// terms unweighted, so these default to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub user: f64,
    pub item: f64,
    pub prediction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { user: 1.0, item: 1.0, prediction: 1.0 }
    }
}

/// Combined generator-phase objective on one tape: both VAE sides plus the
/// prediction term, sharing the reparameterized embeddings.
pub struct GeneratorStep {
    pub objective: Objective,
    pub vae_user: VaeTerms,
    pub vae_item: VaeTerms,
    pub prediction: f64,
}

pub fn generator_objective(
    params: &ModelParams,
    batch: &PredictionBatch,
    rng: &mut ChaCha8Rng,
    variant: Variant,
    weights: &LossWeights,
) -> Result<GeneratorStep, ObjectiveError> {
    if batch.triples.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let d = params.config.embedding_dim;
    let eps_u = prior_rows(d, batch.user_vectors.shape()[0], rng);
    let eps_v = prior_rows(d, batch.item_vectors.shape()[0], rng);
    let (reg, point) = match variant {
        Variant::Dave => (Regularizer::Adversarial, false),
        Variant::DaveAdv => (Regularizer::ClosedFormKl, false),
        Variant::DaveAae => (Regularizer::Adversarial, true),
    };

    let mut tape = Tape::new();
    let user = vae_graph(&mut tape, params, Side::User, &batch.user_vectors, &eps_u, reg, point)?;
    let item = vae_graph(&mut tape, params, Side::Item, &batch.item_vectors, &eps_v, reg, point)?;
    let ll = prediction_ll_node(&mut tape, params, user.embedding, item.embedding, &batch.triples)?;

    let wu = tape.scale(user.objective, weights.user)?;
    let wi = tape.scale(item.objective, weights.item)?;
    let wp = tape.scale(ll, weights.prediction)?;
    let partial = tape.add(wu, wi)?;
    let total = tape.add(partial, wp)?;
    let grads = tape.backward(total)?;

    Ok(GeneratorStep {
        objective: Objective { value: tape.scalar_value(total), grads },
        vae_user: VaeTerms {
            objective: tape.scalar_value(user.objective),
            reconstruction: tape.scalar_value(user.recon),
            regularizer: tape.scalar_value(user.reg),
        },
        vae_item: VaeTerms {
            objective: tape.scalar_value(item.objective),
            reconstruction: tape.scalar_value(item.recon),
            regularizer: tape.scalar_value(item.reg),
        },
        prediction: tape.scalar_value(ll),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::rng::{stream, TAG_INIT, TAG_TRAIN};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            embedding_dim: 2,
            num_users: 3,
            num_items: 4,
            encoder_hidden: vec![3],
            decoder_hidden: vec![3],
            discriminator_hidden: vec![3],
            predictor_hidden: vec![3],
        }
    }

    fn tiny_params(seed: u64) -> ModelParams {
        init_params(&tiny_config(), &mut stream(seed, &[TAG_INIT]))
    }

    fn zero_params() -> ModelParams {
        let mut p = tiny_params(0);
        p.visit_mut(|_, t| t.values_mut().fill(0.0));
        p
    }

    fn user_batch() -> Vec<DenseArray> {
        vec![
            DenseArray::vector(vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
            DenseArray::vector(vec![0.0, 1.0, 0.0, 1.0]).unwrap(),
        ]
    }

    fn tiny_batch() -> PredictionBatch {
        PredictionBatch {
            user_vectors: DenseArray::stack_rows(&user_batch()).unwrap(),
            item_vectors: DenseArray::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap(),
            triples: vec![(0, 0, 1.0), (0, 1, 0.0), (1, 0, 0.0), (1, 1, 1.0)],
        }
    }

    #[test]
    fn zero_discriminator_objective_value() {
        let p = zero_params();
        let mut rng = stream(1, &[TAG_TRAIN]);
        let obj = disc_objective(&p, Side::User, &user_batch(), &mut rng).unwrap();
        assert!((obj.value - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_approaches_zero() {
        let priors = DenseArray::matrix(2, 1, vec![30.0, 40.0]).unwrap();
        let fakes = DenseArray::matrix(2, 1, vec![-30.0, -40.0]).unwrap();
        // single linear unit with weight 1: logit = x, huge on priors,
        // hugely negative on fakes
        let disc = DiscriminatorParams {
            net: crate::model::Mlp {
                layers: vec![crate::model::Layer {
                    weight: DenseArray::matrix(1, 1, vec![1.0]).unwrap(),
                    bias: DenseArray::vector(vec![0.0]).unwrap(),
                }],
            },
        };
        let obj = disc_objective_from_samples(&disc, "d", &priors, &fakes).unwrap();
        assert!(obj.value > -1e-10 && obj.value <= 0.0, "value {}", obj.value);
    }

    #[test]
    fn disc_gradients_only_touch_discriminator() {
        let p = tiny_params(2);
        let mut rng = stream(2, &[TAG_TRAIN]);
        let obj = disc_objective(&p, Side::Item, &vec![
            DenseArray::vector(vec![1.0, 0.0, 1.0]).unwrap(),
            DenseArray::vector(vec![0.0, 1.0, 0.0]).unwrap(),
        ], &mut rng).unwrap();
        assert!(!obj.grads.is_empty());
        for name in obj.grads.keys() {
            assert!(name.starts_with("item_discriminator"), "unexpected grad on {name}");
        }
    }

    #[test]
    fn optimal_disc_closed_form() {
        let normal = |mu: f64| move |x: f64| {
            (-(x - mu) * (x - mu) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
        };
        // p = q -> 0 on a grid
        for i in 0..21 {
            let x = -2.0 + 0.2 * i as f64;
            let v = optimal_disc_value(normal(0.0), normal(0.0), x).unwrap();
            assert!(v.abs() < 1e-12);
        }
        // p = N(0,1), q = N(1,1): value is 0.5 - x
        let v = optimal_disc_value(normal(0.0), normal(1.0), 0.5).unwrap();
        assert!(v.abs() < 1e-12);
        let v = optimal_disc_value(normal(0.0), normal(1.0), 0.0).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert!(optimal_disc_value(|_| 0.0, normal(0.0), 0.0).is_err());
    }

    #[test]
    fn zero_network_vae_value() {
        // zero nets, all-zero data vector of length 4: recon = 4 log 0.5,
        // discriminator term 0
        let p = zero_params();
        let data = vec![DenseArray::vector(vec![0.0; 4]).unwrap()];
        let mut rng = stream(3, &[TAG_TRAIN]);
        let (obj, terms) =
            vae_objective(&p, Side::User, &data, &mut rng, Regularizer::Adversarial).unwrap();
        assert!((terms.reconstruction - 4.0 * 0.5f64.ln()).abs() < 1e-12);
        assert_eq!(terms.regularizer, 0.0);
        assert!((obj.value - terms.reconstruction).abs() < 1e-12);
    }

    #[test]
    fn vae_gradients_never_touch_discriminator() {
        let p = tiny_params(5);
        let mut rng = stream(5, &[TAG_TRAIN]);
        let (obj, _) =
            vae_objective(&p, Side::User, &user_batch(), &mut rng, Regularizer::Adversarial)
                .unwrap();
        for name in obj.grads.keys() {
            assert!(
                name.starts_with("user_encoder") || name.starts_with("user_decoder"),
                "unexpected grad on {name}"
            );
        }
    }

    #[test]
    fn vae_gradient_check() {
        // finite differences through the full objective with frozen noise
        let p = tiny_params(7);
        let rng0 = stream(7, &[TAG_TRAIN]);
        let data = user_batch();
        let (obj, _) =
            vae_objective(&p, Side::User, &data, &mut rng0.clone(), Regularizer::Adversarial)
                .unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        let names: Vec<String> = obj.grads.keys().cloned().collect();
        for name in names {
            let len = obj.grads[&name].len();
            for i in (0..len).step_by(3) {
                let num = {
                    let perturb = |delta: f64| {
                        let mut q = p.clone();
                        q.visit_mut(|n, t| {
                            if n == name {
                                t.values_mut()[i] += delta;
                            }
                        });
                        vae_objective(
                            &q,
                            Side::User,
                            &data,
                            &mut rng0.clone(),
                            Regularizer::Adversarial,
                        )
                        .unwrap()
                        .0
                        .value
                    };
                    (perturb(eps) - perturb(-eps)) / (2.0 * eps)
                };
                let exact = obj.grads[&name].values()[i];
                let denom = exact.abs().max(num.abs());
                let err = if denom < 1e-8 { (exact - num).abs() } else { (exact - num).abs() / denom };
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-5, "worst fd error {worst}");
    }

    #[test]
    fn prediction_objective_examples() {
        let p = zero_params();
        let mut rng = stream(8, &[TAG_TRAIN]);
        let batch = PredictionBatch {
            triples: vec![(0, 0, 1.0)],
            ..tiny_batch()
        };
        // zero network scores 0.5, label 1 -> log 0.5
        let obj = prediction_objective(&p, &batch, &mut rng).unwrap();
        assert!((obj.value - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prediction_objective_finite_under_saturation() {
        // enormous weights saturate the predictor; objective must stay finite
        let mut p = tiny_params(9);
        p.visit_mut(|n, t| {
            if n.starts_with("predictor") {
                for v in t.values_mut() {
                    *v = v.signum() * 50.0;
                }
            }
        });
        let mut rng = stream(9, &[TAG_TRAIN]);
        let obj = prediction_objective(&p, &tiny_batch(), &mut rng).unwrap();
        assert!(obj.value.is_finite());
    }

    #[test]
    fn prediction_gradients_reach_encoders_and_predictor_only() {
        let p = tiny_params(10);
        let mut rng = stream(10, &[TAG_TRAIN]);
        let obj = prediction_objective(&p, &tiny_batch(), &mut rng).unwrap();
        let mut saw_encoder = false;
        let mut saw_predictor = false;
        for name in obj.grads.keys() {
            assert!(
                name.starts_with("user_encoder")
                    || name.starts_with("item_encoder")
                    || name.starts_with("predictor"),
                "unexpected grad on {name}"
            );
            saw_encoder |= name.contains("encoder");
            saw_predictor |= name.starts_with("predictor");
        }
        assert!(saw_encoder && saw_predictor);
    }

    #[test]
    fn kl_trivial_values() {
        let identity = GaussianPosterior {
            mean: DenseArray::vector(vec![0.0, 0.0]).unwrap(),
            log_variance: DenseArray::vector(vec![0.0, 0.0]).unwrap(),
        };
        assert_eq!(closed_form_kl(&identity), 0.0);
        let shifted = GaussianPosterior {
            mean: DenseArray::vector(vec![1.0]).unwrap(),
            log_variance: DenseArray::vector(vec![0.0]).unwrap(),
        };
        assert!((closed_form_kl(&shifted) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_positive_off_identity() {
        let mut rng = stream(11, &[TAG_TRAIN]);
        for _ in 0..20 {
            let post = GaussianPosterior {
                mean: model::standard_normal(3, &mut rng),
                log_variance: model::standard_normal(3, &mut rng),
            };
            assert!(closed_form_kl(&post) > 0.0);
        }
    }

    #[test]
    fn kl_grad_routes_agree() {
        let post = GaussianPosterior {
            mean: DenseArray::vector(vec![0.4, -1.1]).unwrap(),
            log_variance: DenseArray::vector(vec![0.3, -0.6]).unwrap(),
        };
        let (value, dmu, dlv) = closed_form_kl_grad(&post).unwrap();
        assert!((value - closed_form_kl(&post)).abs() < 1e-12);
        // analytic: dKL/dmu = mu, dKL/dlv = 0.5 (exp(lv) - 1)
        for i in 0..2 {
            let mu = post.mean.values()[i];
            let lv = post.log_variance.values()[i];
            assert!((dmu.values()[i] - mu).abs() < 1e-12);
            assert!((dlv.values()[i] - 0.5 * (lv.exp() - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let post = GaussianPosterior {
            mean: DenseArray::vector(vec![0.8, -0.5]).unwrap(),
            log_variance: DenseArray::vector(vec![0.5, -0.7]).unwrap(),
        };
        let analytic = closed_form_kl(&post);
        let mut rng = stream(13, &[TAG_TRAIN]);
        let n = 1_000_000;
        let mut acc = 0.0;
        let sigma = post.sigma();
        for _ in 0..n {
            let eps = model::standard_normal(2, &mut rng);
            let x = model::reparameterize(&post, &eps);
            // log q(x) - log p(x) for diagonal Gaussians
            let mut term = 0.0;
            for i in 0..2 {
                let xi = x.values()[i];
                let mu = post.mean.values()[i];
                let s = sigma.values()[i];
                let log_q = -0.5 * ((xi - mu) / s).powi(2) - s.ln();
                let log_p = -0.5 * xi * xi;
                term += log_q - log_p;
            }
            acc += term;
        }
        let mc = acc / n as f64;
        assert!((mc - analytic).abs() / analytic < 0.01, "mc {mc} vs {analytic}");
    }

    #[test]
    fn adversarial_regularizer_matches_kl_at_optimal_discriminator() {
        // E_q[log p - log q] over reparameterized draws equals -KL
        let post = GaussianPosterior {
            mean: DenseArray::vector(vec![0.6]).unwrap(),
            log_variance: DenseArray::vector(vec![0.4]).unwrap(),
        };
        let s = post.sigma().values()[0];
        let mu = post.mean.values()[0];
        let norm = |m: f64, sd: f64| {
            move |x: f64| {
                (-(x - m) * (x - m) / (2.0 * sd * sd)).exp()
                    / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
        };
        let mut rng = stream(14, &[TAG_TRAIN]);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let eps = model::standard_normal(1, &mut rng);
            let x = model::reparameterize(&post, &eps).values()[0];
            acc += optimal_disc_value(norm(0.0, 1.0), norm(mu, s), x).unwrap();
        }
        let mc = acc / n as f64;
        let neg_kl = -closed_form_kl(&post);
        assert!(
            (mc - neg_kl).abs() / neg_kl.abs() < 0.02,
            "mc {mc} vs analytic {neg_kl}"
        );
    }

    #[test]
    fn aae_point_estimate_coincides_with_zero_sigma_reparam() {
        let p = tiny_params(15);
        let data = user_batch();
        let rows = DenseArray::stack_rows(&data).unwrap();
        let (mean, _) = model::encode_batch(&p, Side::User, &rows).unwrap();
        // reparameterize with epsilon forced to zero
        let post = crate::model::GaussianPosterior {
            mean: DenseArray::vector(mean.row(0).to_vec()).unwrap(),
            log_variance: DenseArray::vector(vec![0.0, 0.0]).unwrap(),
        };
        let zero_eps = DenseArray::vector(vec![0.0, 0.0]).unwrap();
        assert_eq!(model::reparameterize(&post, &zero_eps), post.mean);
    }

    #[test]
    fn aae_fooling_term_at_zero_logit() {
        let p = zero_params();
        let data = vec![DenseArray::vector(vec![0.0; 4]).unwrap()];
        let mut rng = stream(16, &[TAG_TRAIN]);
        let (_, terms) =
            aae_objective(&p, Side::User, &data, &mut rng, AaePhase::Generator).unwrap();
        assert!((terms.regularizer - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aae_generator_gradient_check() {
        let p = tiny_params(17);
        let data = user_batch();
        let rng0 = stream(17, &[TAG_TRAIN]);
        let (obj, _) =
            aae_objective(&p, Side::User, &data, &mut rng0.clone(), AaePhase::Generator).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (name, grad) in &obj.grads {
            for i in (0..grad.len()).step_by(5) {
                let perturb = |delta: f64| {
                    let mut q = p.clone();
                    q.visit_mut(|n, t| {
                        if n == name {
                            t.values_mut()[i] += delta;
                        }
                    });
                    aae_objective(&q, Side::User, &data, &mut rng0.clone(), AaePhase::Generator)
                        .unwrap()
                        .0
                        .value
                };
                let num = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
                let exact = grad.values()[i];
                let denom = exact.abs().max(num.abs());
                let err = if denom < 1e-8 { (exact - num).abs() } else { (exact - num).abs() / denom };
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-5, "worst fd error {worst}");
    }

    #[test]
    fn total_objective_is_component_sum() {
        let zero = BatchLosses::default();
        assert_eq!(total_objective(&zero), 0.0);
        let losses = BatchLosses {
            disc_user: -1.0,
            disc_item: -2.0,
            vae_user: -3.0,
            vae_item: -4.0,
            prediction: -5.0,
            ..Default::default()
        };
        assert_eq!(total_objective(&losses), -15.0);
    }

    #[test]
    fn generator_objective_matches_component_sum() {
        let p = tiny_params(18);
        let mut rng = stream(18, &[TAG_TRAIN]);
        let step = generator_objective(&p, &tiny_batch(), &mut rng, Variant::Dave, &LossWeights::default())
            .unwrap();
        let sum = step.vae_user.objective + step.vae_item.objective + step.prediction;
        assert!((step.objective.value - sum).abs() < 1e-10);
    }

    #[test]
    fn generator_variants_respect_gradient_support() {
        let p = tiny_params(19);
        for variant in [Variant::Dave, Variant::DaveAdv, Variant::DaveAae] {
            let mut rng = stream(19, &[TAG_TRAIN]);
            let step =
                generator_objective(&p, &tiny_batch(), &mut rng, variant, &LossWeights::default())
                    .unwrap();
            for name in step.objective.grads.keys() {
                assert!(!name.contains("discriminator"), "{variant}: grad on {name}");
            }
        }
    }
}
