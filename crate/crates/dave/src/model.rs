//! The six networks of the model — per-side inference networks, decoders,
//! and discriminators — plus the MLP predictor on the element-wise product
//! of user and item embeddings, and the checkpoint format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Side;
use crate::diffcore::{DenseArray, NodeId, Tape, TapeError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("expected vector of length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("checkpoint io on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Log-variance outputs are clamped to this symmetric range before
/// exponentiation.
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Per-entity Gaussian embedding posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DenseArray,
    pub log_variance: DenseArray,
}

impl GaussianPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standard deviation, exp(0.5 * log_variance); strictly positive.
    pub fn sigma(&self) -> DenseArray {
        let values = self.log_variance.values().iter().map(|&lv| (0.5 * lv).exp()).collect();
        DenseArray::vector(values).expect("sigma is finite under the clamp")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[fan_in, fan_out]`, row-major.
    pub weight: DenseArray,
    pub bias: DenseArray,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub trunk: Mlp,
    pub mean_head: Layer,
    pub logvar_head: Layer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub net: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub net: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub net: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub num_users: usize,
    pub num_items: usize,
    /// Encoder trunk widths; empty means the heads read the input directly.
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn new(embedding_dim: usize, num_users: usize, num_items: usize) -> Self {
        ModelConfig {
            embedding_dim,
            num_users,
            num_items,
            encoder_hidden: vec![2 * embedding_dim],
            decoder_hidden: vec![2 * embedding_dim],
            discriminator_hidden: vec![50, 100],
            predictor_hidden: vec![32, 32, 32],
        }
    }

    fn input_width(&self, side: Side) -> usize {
        match side {
            Side::User => self.num_items,
            Side::Item => self.num_users,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub user_encoder: EncoderParams,
    pub item_encoder: EncoderParams,
    pub user_decoder: DecoderParams,
    pub item_decoder: DecoderParams,
    pub user_discriminator: DiscriminatorParams,
    pub item_discriminator: DiscriminatorParams,
    pub predictor: PredictorParams,
}

fn glorot_layer(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Layer {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let weight = DenseArray::matrix(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("glorot weights are finite");
    Layer { weight, bias: DenseArray::zeros(vec![fan_out]) }
}

fn init_mlp(widths: &[usize], rng: &mut ChaCha8Rng) -> Mlp {
    let layers = widths.windows(2).map(|w| glorot_layer(w[0], w[1], rng)).collect();
    Mlp { layers }
}

fn init_encoder(input: usize, hidden: &[usize], d: usize, rng: &mut ChaCha8Rng) -> EncoderParams {
    let mut widths = vec![input];
    widths.extend_from_slice(hidden);
    let trunk = init_mlp(&widths, rng);
    let trunk_out = *widths.last().unwrap();
    EncoderParams {
        trunk,
        mean_head: glorot_layer(trunk_out, d, rng),
        logvar_head: glorot_layer(trunk_out, d, rng),
    }
}

pub fn init_params(config: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams {
    let d = config.embedding_dim;
    let (n, m) = (config.num_users, config.num_items);

    let user_encoder = init_encoder(m, &config.encoder_hidden, d, rng);
    let item_encoder = init_encoder(n, &config.encoder_hidden, d, rng);

    let decoder_widths = |out: usize| {
        let mut w = vec![d];
        w.extend_from_slice(&config.decoder_hidden);
        w.push(out);
        w
    };
    let user_decoder = DecoderParams { net: init_mlp(&decoder_widths(m), rng) };
    let item_decoder = DecoderParams { net: init_mlp(&decoder_widths(n), rng) };

    let mut disc_widths = vec![d];
    disc_widths.extend_from_slice(&config.discriminator_hidden);
    disc_widths.push(1);
    let user_discriminator = DiscriminatorParams { net: init_mlp(&disc_widths, rng) };
    let item_discriminator = DiscriminatorParams { net: init_mlp(&disc_widths, rng) };

    let mut pred_widths = vec![d];
    pred_widths.extend_from_slice(&config.predictor_hidden);
    pred_widths.push(1);
    let predictor = PredictorParams { net: init_mlp(&pred_widths, rng) };

    ModelParams {
        config: config.clone(),
        user_encoder,
        item_encoder,
        user_decoder,
        item_decoder,
        user_discriminator,
        item_discriminator,
        predictor,
    }
}

impl ModelParams {
    pub fn encoder(&self, side: Side) -> &EncoderParams {
        match side {
            Side::User => &self.user_encoder,
            Side::Item => &self.item_encoder,
        }
    }

    pub fn decoder(&self, side: Side) -> &DecoderParams {
        match side {
            Side::User => &self.user_decoder,
            Side::Item => &self.item_decoder,
        }
    }

    pub fn discriminator(&self, side: Side) -> &DiscriminatorParams {
        match side {
            Side::User => &self.user_discriminator,
            Side::Item => &self.item_discriminator,
        }
    }

    /// Visit every tensor in the fixed declaration order used by checkpoints
    /// and optimizers.
    pub fn visit(&self, mut f: impl FnMut(&str, &DenseArray)) {
        fn mlp(prefix: &str, net: &Mlp, f: &mut impl FnMut(&str, &DenseArray)) {
            for (i, layer) in net.layers.iter().enumerate() {
                f(&format!("{prefix}.{i}.weight"), &layer.weight);
                f(&format!("{prefix}.{i}.bias"), &layer.bias);
            }
        }
        fn enc(prefix: &str, e: &EncoderParams, f: &mut impl FnMut(&str, &DenseArray)) {
            mlp(&format!("{prefix}.trunk"), &e.trunk, f);
            f(&format!("{prefix}.mean.weight"), &e.mean_head.weight);
            f(&format!("{prefix}.mean.bias"), &e.mean_head.bias);
            f(&format!("{prefix}.logvar.weight"), &e.logvar_head.weight);
            f(&format!("{prefix}.logvar.bias"), &e.logvar_head.bias);
        }
        enc("user_encoder", &self.user_encoder, &mut f);
        enc("item_encoder", &self.item_encoder, &mut f);
        mlp("user_decoder", &self.user_decoder.net, &mut f);
        mlp("item_decoder", &self.item_decoder.net, &mut f);
        mlp("user_discriminator", &self.user_discriminator.net, &mut f);
        mlp("item_discriminator", &self.item_discriminator.net, &mut f);
        mlp("predictor", &self.predictor.net, &mut f);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut DenseArray)) {
        fn mlp(prefix: &str, net: &mut Mlp, f: &mut impl FnMut(&str, &mut DenseArray)) {
            for (i, layer) in net.layers.iter_mut().enumerate() {
                f(&format!("{prefix}.{i}.weight"), &mut layer.weight);
                f(&format!("{prefix}.{i}.bias"), &mut layer.bias);
            }
        }
        fn enc(prefix: &str, e: &mut EncoderParams, f: &mut impl FnMut(&str, &mut DenseArray)) {
            mlp(&format!("{prefix}.trunk"), &mut e.trunk, f);
            f(&format!("{prefix}.mean.weight"), &mut e.mean_head.weight);
            f(&format!("{prefix}.mean.bias"), &mut e.mean_head.bias);
            f(&format!("{prefix}.logvar.weight"), &mut e.logvar_head.weight);
            f(&format!("{prefix}.logvar.bias"), &mut e.logvar_head.bias);
        }
        enc("user_encoder", &mut self.user_encoder, &mut f);
        enc("item_encoder", &mut self.item_encoder, &mut f);
        mlp("user_decoder", &mut self.user_decoder.net, &mut f);
        mlp("item_decoder", &mut self.item_decoder.net, &mut f);
        mlp("user_discriminator", &mut self.user_discriminator.net, &mut f);
        mlp("item_discriminator", &mut self.item_discriminator.net, &mut f);
        mlp("predictor", &mut self.predictor.net, &mut f);
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(|_, a| n += a.len());
        n
    }
}

// ---------------------------------------------------------------------------
// Tape graph builders shared by the objectives and evaluation paths.
// ---------------------------------------------------------------------------

fn param_node(tape: &mut Tape, name: String, value: &DenseArray, trainable: bool) -> NodeId {
    if trainable {
        tape.input(name, value.clone())
    } else {
        tape.constant(value.clone())
    }
}

fn layer_graph(
    tape: &mut Tape,
    layer: &Layer,
    name: &str,
    trainable: bool,
    input: NodeId,
) -> Result<NodeId, TapeError> {
    let w = param_node(tape, format!("{name}.weight"), &layer.weight, trainable);
    let b = param_node(tape, format!("{name}.bias"), &layer.bias, trainable);
    let wx = tape.matmul(input, w)?;
    tape.add_bias(wx, b)
}

/// MLP with relu hidden layers and a linear final layer, input `[B, in]`.
fn mlp_logits_graph(
    tape: &mut Tape,
    net: &Mlp,
    prefix: &str,
    trainable: bool,
    input: NodeId,
) -> Result<NodeId, TapeError> {
    let mut x = input;
    let last = net.layers.len() - 1;
    for (i, layer) in net.layers.iter().enumerate() {
        x = layer_graph(tape, layer, &format!("{prefix}.{i}"), trainable, x)?;
        if i != last {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Inference network: returns `[B, d]` mean and clamped log-variance nodes.
pub fn encoder_graph(
    tape: &mut Tape,
    enc: &EncoderParams,
    prefix: &str,
    trainable: bool,
    input: NodeId,
) -> Result<(NodeId, NodeId), TapeError> {
    let mut x = input;
    for (i, layer) in enc.trunk.layers.iter().enumerate() {
        x = layer_graph(tape, layer, &format!("{prefix}.trunk.{i}"), trainable, x)?;
        x = tape.relu(x)?;
    }
    let mean = layer_graph(tape, &enc.mean_head, &format!("{prefix}.mean"), trainable, x)?;
    let logvar_raw =
        layer_graph(tape, &enc.logvar_head, &format!("{prefix}.logvar"), trainable, x)?;
    let logvar = tape.clamp(logvar_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
    Ok((mean, logvar))
}

/// Reparameterization: mean + exp(0.5 * logvar) ⊙ epsilon.
pub fn reparam_graph(
    tape: &mut Tape,
    mean: NodeId,
    logvar: NodeId,
    epsilon: NodeId,
) -> Result<NodeId, TapeError> {
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    let scaled = tape.mul(sigma, epsilon)?;
    tape.add(mean, scaled)
}

/// Decoder pre-sigmoid logits, `[B, out_width]`.
pub fn decoder_logits_graph(
    tape: &mut Tape,
    dec: &DecoderParams,
    prefix: &str,
    trainable: bool,
    embedding: NodeId,
) -> Result<NodeId, TapeError> {
    mlp_logits_graph(tape, &dec.net, prefix, trainable, embedding)
}

/// Discriminator logits, `[B, 1]`.
pub fn discriminator_graph(
    tape: &mut Tape,
    disc: &DiscriminatorParams,
    prefix: &str,
    trainable: bool,
    embedding: NodeId,
) -> Result<NodeId, TapeError> {
    mlp_logits_graph(tape, &disc.net, prefix, trainable, embedding)
}

/// Predictor pre-sigmoid logits on the element-wise product of embeddings.
pub fn predictor_logits_graph(
    tape: &mut Tape,
    pred: &PredictorParams,
    prefix: &str,
    trainable: bool,
    user_emb: NodeId,
    item_emb: NodeId,
) -> Result<NodeId, TapeError> {
    let product = tape.mul(user_emb, item_emb)?;
    mlp_logits_graph(tape, &pred.net, prefix, trainable, product)
}

// ---------------------------------------------------------------------------
// Deterministic evaluation-path forward passes.
// ---------------------------------------------------------------------------

fn as_row_matrix(v: &DenseArray) -> DenseArray {
    DenseArray::matrix(1, v.len(), v.values().to_vec()).expect("vector reshapes to one row")
}

fn check_len(expected: usize, got: usize) -> Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::LengthMismatch { expected, got });
    }
    Ok(())
}

/// Encode a batch of interaction vectors stacked as `[B, width]`.
pub fn encode_batch(
    params: &ModelParams,
    side: Side,
    rows: &DenseArray,
) -> Result<(DenseArray, DenseArray), ModelError> {
    check_len(params.config.input_width(side), rows.shape()[1])?;
    let mut tape = Tape::new();
    let input = tape.constant(rows.clone());
    let (mean, logvar) = encoder_graph(&mut tape, params.encoder(side), "enc", false, input)?;
    Ok((tape.value(mean), tape.value(logvar)))
}

/// Posterior for one interaction vector; a pure function of the input.
pub fn encode(
    params: &ModelParams,
    side: Side,
    vector: &DenseArray,
) -> Result<GaussianPosterior, ModelError> {
    check_len(params.config.input_width(side), vector.len())?;
    let (mean, logvar) = encode_batch(params, side, &as_row_matrix(vector))?;
    Ok(GaussianPosterior {
        mean: DenseArray::vector(mean.values().to_vec()).expect("finite"),
        log_variance: DenseArray::vector(logvar.values().to_vec()).expect("finite"),
    })
}

/// mean + sigma ⊙ epsilon.
pub fn reparameterize(posterior: &GaussianPosterior, epsilon: &DenseArray) -> DenseArray {
    let sigma = posterior.sigma();
    let values = posterior
        .mean
        .values()
        .iter()
        .zip(sigma.values())
        .zip(epsilon.values())
        .map(|((&mu, &s), &e)| mu + s * e)
        .collect();
    DenseArray::vector(values).expect("reparameterized embedding is finite")
}

/// Per-entry reconstruction probabilities in (0, 1).
pub fn decode(
    params: &ModelParams,
    side: Side,
    embedding: &DenseArray,
) -> Result<DenseArray, ModelError> {
    check_len(params.config.embedding_dim, embedding.len())?;
    let mut tape = Tape::new();
    let input = tape.constant(as_row_matrix(embedding));
    let logits = decoder_logits_graph(&mut tape, params.decoder(side), "dec", false, input)?;
    let probs = tape.sigmoid(logits)?;
    Ok(DenseArray::vector(tape.value(probs).values().to_vec()).expect("finite"))
}

/// Raw discriminator logit; sigmoid of it is the probability the sample came
/// from the prior.
pub fn discriminate(
    params: &ModelParams,
    side: Side,
    embedding: &DenseArray,
) -> Result<f64, ModelError> {
    check_len(params.config.embedding_dim, embedding.len())?;
    let mut tape = Tape::new();
    let input = tape.constant(as_row_matrix(embedding));
    let logit = discriminator_graph(&mut tape, params.discriminator(side), "disc", false, input)?;
    Ok(tape.scalar_value(logit))
}

/// Interaction probability for one (user embedding, item embedding) pair.
pub fn predict(
    params: &ModelParams,
    user_emb: &DenseArray,
    item_emb: &DenseArray,
) -> Result<f64, ModelError> {
    let scores = predict_batch(params, &as_row_matrix(user_emb), &as_row_matrix(item_emb))?;
    Ok(scores[0])
}

/// Batched prediction for aligned `[B, d]` embedding matrices.
pub fn predict_batch(
    params: &ModelParams,
    user_embs: &DenseArray,
    item_embs: &DenseArray,
) -> Result<Vec<f64>, ModelError> {
    let d = params.config.embedding_dim;
    check_len(d, user_embs.shape()[1])?;
    check_len(d, item_embs.shape()[1])?;
    check_len(user_embs.shape()[0], item_embs.shape()[0])?;
    let mut tape = Tape::new();
    let u = tape.constant(user_embs.clone());
    let v = tape.constant(item_embs.clone());
    let logits = predictor_logits_graph(&mut tape, &params.predictor, "pred", false, u, v)?;
    let scores = tape.sigmoid(logits)?;
    Ok(tape.value(scores).values().to_vec())
}

/// d independent standard-normal draws.
pub fn sample_prior(d: usize, rng: &mut ChaCha8Rng) -> DenseArray {
    standard_normal(d, rng)
}

pub fn standard_normal(n: usize, rng: &mut ChaCha8Rng) -> DenseArray {
    let values = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    DenseArray::vector(values).expect("normal draws are finite")
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "DAVE1", length-prefixed JSON manifest, then each tensor
// as length-prefixed little-endian f64s in declaration order.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 5] = b"DAVE1";

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let io = |source| ModelError::Io { path: path.display().to_string(), source };
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let manifest = serde_json::to_vec(&params.config).expect("config serializes");
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest);
    params.visit(|_, tensor| {
        buf.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
        for v in tensor.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams, ModelError> {
    let path = path.as_ref();
    let io = |source| ModelError::Io { path: path.display().to_string(), source };
    let mut buf = Vec::new();
    fs::File::open(path).map_err(io)?.read_to_end(&mut buf).map_err(io)?;

    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *pos + n > buf.len() {
            return Err(ModelError::Corrupt("truncated file".into()));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 5)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Corrupt("bad magic".into()));
    }
    let manifest_len =
        u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let config: ModelConfig = serde_json::from_slice(take(&mut pos, manifest_len)?)
        .map_err(|e| ModelError::Corrupt(format!("manifest: {e}")))?;

    // Rebuild the parameter skeleton from the manifest, then fill tensors in
    // declaration order.
    let mut rng = crate::rng::stream(0, &[crate::rng::TAG_INIT]);
    let mut params = init_params(&config, &mut rng);
    let mut err = None;
    params.visit_mut(|name, tensor| {
        if err.is_some() {
            return;
        }
        let mut fill = || -> Result<(), ModelError> {
            let count =
                u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            if count != tensor.len() {
                return Err(ModelError::Corrupt(format!(
                    "tensor {name}: expected {} values, found {count}",
                    tensor.len()
                )));
            }
            let bytes = take(&mut pos, 8 * count)?;
            for (i, chunk) in bytes.chunks_exact(8).enumerate() {
                tensor.values_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            Ok(())
        };
        if let Err(e) = fill() {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if pos != buf.len() {
        return Err(ModelError::Corrupt("trailing bytes".into()));
    }
    Ok(params)
}
