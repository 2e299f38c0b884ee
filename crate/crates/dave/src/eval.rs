//! Ranking evaluation: leave-one-out HR@k / NDCG@k over fixed candidate
//! sets, the eval-time noise-robustness sweep, and posterior export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::data::{inject_noise, interaction_vector, DataError, Side, Split};
use crate::diffcore::DenseArray;
use crate::model::{self, ModelError, ModelParams};
use crate::rng::{stream, TAG_NOISE};

pub const EVAL_KS: [usize; 3] = [5, 10, 20];

/// Rows encoded per tape when batch-encoding every entity.
const ENCODE_CHUNK: usize = 512;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("user {user}: held-out item {item} appears among its negatives")]
    CandidateOverlap { user: usize, item: u32 },
    #[error("no users carry held-out items")]
    NoEvaluatedUsers,
    #[error("k must be positive")]
    ZeroK,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 1-based rank of the held-out item among its candidates. Only strictly
/// greater negative scores push the item down, so ties favor it.
pub fn rank_test_item(test_score: f64, negative_scores: &[f64]) -> usize {
    1 + negative_scores.iter().filter(|&&s| s > test_score).count()
}

pub fn hr_at_k(rank: usize, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

/// Single-relevant-item NDCG: 1 / log2(rank + 1) inside the cut, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    Ok(if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 })
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub num_users: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSet {
    Validation,
    Test,
}

#[derive(Debug, Clone, Serialize)]
pub struct NoisePoint {
    pub level: f64,
    pub metrics: Metrics,
}

/// Metrics record written by the CLI; one JSON object per evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_level: Option<f64>,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Stack every entity's train interaction vector into one matrix.
fn stacked_vectors(split: &Split, side: Side) -> Result<DenseArray, EvalError> {
    let count = match side {
        Side::User => split.num_users(),
        Side::Item => split.num_items(),
    };
    let rows: Result<Vec<_>, _> =
        (0..count).map(|id| interaction_vector(split, side, id)).collect();
    Ok(DenseArray::stack_rows(&rows?).expect("uniform vector widths"))
}

/// Posterior means (and log-variances) for every row, encoded in chunks.
fn encode_all(
    params: &ModelParams,
    side: Side,
    rows: &DenseArray,
) -> Result<(DenseArray, DenseArray), EvalError> {
    let n = rows.shape()[0];
    let w = rows.shape()[1];
    let d = params.config.embedding_dim;
    let mut means = Vec::with_capacity(n * d);
    let mut logvars = Vec::with_capacity(n * d);
    let mut start = 0;
    while start < n {
        let end = (start + ENCODE_CHUNK).min(n);
        let chunk_rows: Vec<DenseArray> = (start..end)
            .map(|i| DenseArray::vector(rows.row(i).to_vec()).expect("finite row"))
            .collect();
        let chunk = DenseArray::stack_rows(&chunk_rows).expect("uniform rows");
        debug_assert_eq!(chunk.shape(), &[end - start, w]);
        let (mu, lv) = model::encode_batch(params, side, &chunk)?;
        means.extend_from_slice(mu.values());
        logvars.extend_from_slice(lv.values());
        start = end;
    }
    Ok((
        DenseArray::matrix(n, d, means).expect("finite means"),
        DenseArray::matrix(n, d, logvars).expect("finite log-variances"),
    ))
}

fn gather(matrix: &DenseArray, indices: &[usize]) -> DenseArray {
    let d = matrix.shape()[1];
    let mut values = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        values.extend_from_slice(matrix.row(i));
    }
    DenseArray::matrix(indices.len(), d, values).expect("gathered rows are finite")
}

/// Rank candidates for every evaluated user with posterior-mean embeddings
/// computed from the given interaction matrices.
fn evaluate_with_vectors(
    params: &ModelParams,
    split: &Split,
    which: EvalSet,
    user_rows: &DenseArray,
    item_rows: &DenseArray,
) -> Result<Metrics, EvalError> {
    let (user_means, _) = encode_all(params, Side::User, user_rows)?;
    let (item_means, _) = encode_all(params, Side::Item, item_rows)?;

    let mut hr: BTreeMap<usize, f64> = EVAL_KS.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg: BTreeMap<usize, f64> = EVAL_KS.iter().map(|&k| (k, 0.0)).collect();
    let mut evaluated = 0usize;

    for u in split.evaluated_users() {
        let held_out = match which {
            EvalSet::Validation => split.validation[u],
            EvalSet::Test => split.test[u],
        };
        let Some(held_out) = held_out else { continue };
        let negatives = &split.eval_negatives[u];
        if negatives.contains(&held_out) {
            return Err(EvalError::CandidateOverlap { user: u, item: held_out });
        }

        let mut candidates: Vec<usize> = Vec::with_capacity(1 + negatives.len());
        candidates.push(held_out as usize);
        candidates.extend(negatives.iter().map(|&v| v as usize));

        let items = gather(&item_means, &candidates);
        let users = gather(&user_means, &vec![u; candidates.len()]);
        let scores = model::predict_batch(params, &users, &items)?;
        let rank = rank_test_item(scores[0], &scores[1..]);

        for &k in &EVAL_KS {
            *hr.get_mut(&k).unwrap() += hr_at_k(rank, k)?;
            *ndcg.get_mut(&k).unwrap() += ndcg_at_k(rank, k)?;
        }
        evaluated += 1;
    }

    if evaluated == 0 {
        return Err(EvalError::NoEvaluatedUsers);
    }
    for k in EVAL_KS {
        *hr.get_mut(&k).unwrap() /= evaluated as f64;
        *ndcg.get_mut(&k).unwrap() /= evaluated as f64;
    }
    Ok(Metrics { num_users: evaluated, hr, ndcg })
}

/// Leave-one-out evaluation on clean interaction vectors.
pub fn evaluate(params: &ModelParams, split: &Split, which: EvalSet) -> Result<Metrics, EvalError> {
    let user_rows = stacked_vectors(split, Side::User)?;
    let item_rows = stacked_vectors(split, Side::Item)?;
    evaluate_with_vectors(params, split, which, &user_rows, &item_rows)
}

fn noisy_rows(
    split: &Split,
    side: Side,
    level: f64,
    level_index: usize,
    seed: u64,
) -> Result<DenseArray, EvalError> {
    let count = match side {
        Side::User => split.num_users(),
        Side::Item => split.num_items(),
    };
    let side_tag = match side {
        Side::User => 0u64,
        Side::Item => 1u64,
    };
    let rows: Result<Vec<_>, EvalError> = (0..count)
        .map(|id| {
            let clean = interaction_vector(split, side, id)?;
            let mut rng = stream(seed, &[TAG_NOISE, level_index as u64, side_tag, id as u64]);
            Ok(inject_noise(&clean, level, &mut rng)?)
        })
        .collect();
    Ok(DenseArray::stack_rows(&rows?).expect("uniform vector widths"))
}

/// Test-set evaluation under eval-time corruption: at each level, exactly
/// round(level * len) entries of every interaction vector are flipped, on
/// both sides. The training split itself is never modified.
pub fn robustness_run(
    params: &ModelParams,
    split: &Split,
    levels: &[f64],
    seed: u64,
) -> Result<Vec<NoisePoint>, EvalError> {
    let mut points = Vec::with_capacity(levels.len());
    for (i, &level) in levels.iter().enumerate() {
        let user_rows = noisy_rows(split, Side::User, level, i, seed)?;
        let item_rows = noisy_rows(split, Side::Item, level, i, seed)?;
        let metrics = evaluate_with_vectors(params, split, EvalSet::Test, &user_rows, &item_rows)?;
        points.push(NoisePoint { level, metrics });
    }
    Ok(points)
}

/// Write one side's posterior parameters as CSV: id, means, then standard
/// deviations. sigma = exp(logvar / 2) is always positive.
pub fn export_posteriors(
    params: &ModelParams,
    split: &Split,
    side: Side,
    path: impl AsRef<Path>,
) -> Result<(), EvalError> {
    let rows = stacked_vectors(split, side)?;
    let (means, logvars) = encode_all(params, side, &rows)?;
    let d = params.config.embedding_dim;
    let n = rows.shape()[0];

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("id");
    for i in 0..d {
        header.push_str(&format!(",mu_{i}"));
    }
    for i in 0..d {
        header.push_str(&format!(",sigma_{i}"));
    }
    writeln!(out, "{header}")?;

    for id in 0..n {
        let mut line = id.to_string();
        for &mu in means.row(id) {
            line.push_str(&format!(",{mu}"));
        }
        for &lv in logvars.row(id) {
            line.push_str(&format!(",{}", (0.5 * lv).exp()));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}
