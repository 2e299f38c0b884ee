//! Implicit-feedback dataset loading, leave-one-out splitting, negative
//! sampling, and evaluation-time noise injection.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::DenseArray;
use crate::rng::{self, TAG_SPLIT};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("no interactions left after filtering")]
    EmptyAfterFilter,
    #[error("policy=latest requires timestamps")]
    MissingTimestamps,
    #[error("id {id} out of range for {side} (max {max})")]
    IdOutOfRange { side: &'static str, id: usize, max: usize },
    #[error("noise level {0} outside [0, 1]")]
    BadNoiseLevel(f64),
    #[error("interaction vector is not binary at index {0}")]
    NotBinary(usize),
    #[error("user {user} has no negative candidates")]
    NoNegativeCandidates { user: usize },
    #[error("split directory {0} is missing file {1}")]
    MissingSplitFile(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    MovielensTab,
    MovielensDoubleColon,
    Csv,
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Format::MovielensTab => write!(f, "movielens-tab"),
            Format::MovielensDoubleColon => write!(f, "movielens-double-colon"),
            Format::Csv => write!(f, "csv"),
        }
    }
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "movielens-tab" => Ok(Format::MovielensTab),
            "movielens-double-colon" => Ok(Format::MovielensDoubleColon),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPolicy {
    Latest,
    Random,
}

impl std::str::FromStr for SplitPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "latest" => Ok(SplitPolicy::Latest),
            "random" => Ok(SplitPolicy::Random),
            other => Err(format!("unknown split policy {other:?}")),
        }
    }
}

/// Sparse binary user-item matrix with row and column views.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    num_users: usize,
    num_items: usize,
    rows: Vec<Vec<u32>>,
    cols: Vec<Vec<u32>>,
    timestamps: Option<HashMap<(u32, u32), i64>>,
}

impl InteractionMatrix {
    pub fn from_pairs(
        num_users: usize,
        num_items: usize,
        pairs: &[(u32, u32)],
        timestamps: Option<&HashMap<(u32, u32), i64>>,
    ) -> Result<Self, DataError> {
        let mut rows = vec![Vec::new(); num_users];
        let mut cols = vec![Vec::new(); num_items];
        let mut seen = HashSet::new();
        for &(u, v) in pairs {
            if u as usize >= num_users {
                return Err(DataError::IdOutOfRange { side: "user", id: u as usize, max: num_users });
            }
            if v as usize >= num_items {
                return Err(DataError::IdOutOfRange { side: "item", id: v as usize, max: num_items });
            }
            if seen.insert((u, v)) {
                rows[u as usize].push(v);
                cols[v as usize].push(u);
            }
        }
        for r in &mut rows {
            r.sort_unstable();
        }
        for c in &mut cols {
            c.sort_unstable();
        }
        Ok(InteractionMatrix { num_users, num_items, rows, cols, timestamps: timestamps.cloned() })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_interactions(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn user_items(&self, user: usize) -> &[u32] {
        &self.rows[user]
    }

    pub fn item_users(&self, item: usize) -> &[u32] {
        &self.cols[item]
    }

    pub fn has_timestamps(&self) -> bool {
        self.timestamps.is_some()
    }

    pub fn timestamp(&self, user: u32, item: u32) -> Option<i64> {
        self.timestamps.as_ref().and_then(|t| t.get(&(user, item)).copied())
    }

    pub fn contains(&self, user: u32, item: u32) -> bool {
        self.rows[user as usize].binary_search(&item).is_ok()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&v| (u as u32, v)))
    }
}

#[derive(Debug)]
struct RawRecord {
    user: String,
    item: String,
    timestamp: Option<i64>,
}

fn parse_records(text: &str, format: Format) -> Result<Vec<RawRecord>, DataError> {
    let mut records = Vec::new();
    let mut lines = text.lines().enumerate();
    let mut csv_cols: Option<(usize, usize, Option<usize>)> = None;
    if format == Format::Csv {
        let (_, header) = lines
            .next()
            .ok_or(DataError::Malformed { line: 1, detail: "empty file".into() })?;
        let names: Vec<String> =
            header.split(',').map(|s| s.trim().to_ascii_lowercase()).collect();
        let find = |want: &str| names.iter().position(|n| n.contains(want));
        let user = find("user").ok_or(DataError::Malformed {
            line: 1,
            detail: "csv header lacks a user column".into(),
        })?;
        let item = find("item").ok_or(DataError::Malformed {
            line: 1,
            detail: "csv header lacks an item column".into(),
        })?;
        csv_cols = Some((user, item, find("timestamp")));
    }
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = match format {
            Format::MovielensTab => line.split_whitespace().collect(),
            Format::MovielensDoubleColon => line.split("::").collect(),
            Format::Csv => line.split(',').map(str::trim).collect(),
        };
        let record = match format {
            Format::Csv => {
                let (uc, ic, tc) = csv_cols.unwrap();
                let get = |c: usize| {
                    fields.get(c).copied().ok_or(DataError::Malformed {
                        line: line_no,
                        detail: format!("missing column {c}"),
                    })
                };
                RawRecord {
                    user: get(uc)?.to_string(),
                    item: get(ic)?.to_string(),
                    timestamp: match tc {
                        Some(c) => Some(get(c)?.parse().map_err(|_| DataError::Malformed {
                            line: line_no,
                            detail: "bad timestamp".into(),
                        })?),
                        None => None,
                    },
                }
            }
            _ => {
                if fields.len() < 2 {
                    return Err(DataError::Malformed {
                        line: line_no,
                        detail: format!("expected at least user and item, got {line:?}"),
                    });
                }
                RawRecord {
                    user: fields[0].to_string(),
                    item: fields[1].to_string(),
                    timestamp: match fields.get(3) {
                        Some(t) => Some(t.parse().map_err(|_| DataError::Malformed {
                            line: line_no,
                            detail: "bad timestamp".into(),
                        })?),
                        None => None,
                    },
                }
            }
        };
        records.push(record);
    }
    Ok(records)
}

/// Load and binarize an interaction file, iteratively dropping users and
/// items below the retention thresholds until both constraints hold, then
/// remapping ids to dense ranges.
pub fn load_interactions(
    path: impl AsRef<Path>,
    format: Format,
    min_user_interactions: usize,
    min_item_interactions: usize,
) -> Result<InteractionMatrix, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    build_matrix(&parse_records(&text, format)?, min_user_interactions, min_item_interactions)
}

fn build_matrix(
    records: &[RawRecord],
    min_user: usize,
    min_item: usize,
) -> Result<InteractionMatrix, DataError> {
    // Dedupe on raw ids, keeping the first timestamp seen.
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    let mut pairs: Vec<(&str, &str, Option<i64>)> = Vec::new();
    for r in records {
        if seen.insert((&r.user, &r.item)) {
            pairs.push((&r.user, &r.item, r.timestamp));
        }
    }

    // Alternate user/item filtering until a fixpoint.
    loop {
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for &(u, v, _) in &pairs {
            *user_deg.entry(u).or_default() += 1;
            *item_deg.entry(v).or_default() += 1;
        }
        let before = pairs.len();
        pairs.retain(|&(u, v, _)| user_deg[u] >= min_user && item_deg[v] >= min_item);
        if pairs.len() == before {
            break;
        }
    }
    if pairs.is_empty() {
        return Err(DataError::EmptyAfterFilter);
    }

    // Dense remap, ordered numerically when ids parse as integers.
    let mut users: Vec<&str> = pairs.iter().map(|p| p.0).collect::<HashSet<_>>().into_iter().collect();
    let mut items: Vec<&str> = pairs.iter().map(|p| p.1).collect::<HashSet<_>>().into_iter().collect();
    sort_ids(&mut users);
    sort_ids(&mut items);
    let user_map: BTreeMap<&str, u32> =
        users.iter().enumerate().map(|(i, &s)| (s, i as u32)).collect();
    let item_map: BTreeMap<&str, u32> =
        items.iter().enumerate().map(|(i, &s)| (s, i as u32)).collect();

    let has_ts = pairs.iter().all(|p| p.2.is_some());
    let mut dense_pairs = Vec::with_capacity(pairs.len());
    let mut timestamps = HashMap::new();
    for (u, v, ts) in pairs {
        let du = user_map[u];
        let dv = item_map[v];
        dense_pairs.push((du, dv));
        if let Some(t) = ts {
            timestamps.insert((du, dv), t);
        }
    }
    InteractionMatrix::from_pairs(
        users.len(),
        items.len(),
        &dense_pairs,
        has_ts.then_some(&timestamps),
    )
}

fn sort_ids(ids: &mut [&str]) {
    if ids.iter().all(|s| s.parse::<i64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<i64>().unwrap());
    } else {
        ids.sort_unstable();
    }
}

/// Leave-one-out split with per-user fixed evaluation negatives.
///
/// Users with fewer than three interactions keep all of them in train and are
/// excluded from validation/test (recorded in `skipped_users`).
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: InteractionMatrix,
    /// One held-out validation item per evaluated user.
    pub validation: Vec<Option<u32>>,
    /// One held-out test item per evaluated user.
    pub test: Vec<Option<u32>>,
    /// 99 items per evaluated user, none of them interacted with anywhere in
    /// the full matrix.
    pub eval_negatives: Vec<Vec<u32>>,
    pub skipped_users: Vec<u32>,
}

pub const EVAL_NEGATIVES: usize = 99;

pub fn leave_one_out_split(
    matrix: &InteractionMatrix,
    policy: SplitPolicy,
    seed: u64,
) -> Result<Split, DataError> {
    if policy == SplitPolicy::Latest && !matrix.has_timestamps() {
        return Err(DataError::MissingTimestamps);
    }
    let n = matrix.num_users();
    let m = matrix.num_items();
    let mut train_pairs = Vec::new();
    let mut validation = vec![None; n];
    let mut test = vec![None; n];
    let mut eval_negatives = vec![Vec::new(); n];
    let mut skipped = Vec::new();

    for u in 0..n {
        let items = matrix.user_items(u);
        let candidates = m - items.len();
        if items.len() < 3 || candidates < EVAL_NEGATIVES {
            skipped.push(u as u32);
            train_pairs.extend(items.iter().map(|&v| (u as u32, v)));
            continue;
        }
        let mut rng = rng::stream(seed, &[TAG_SPLIT, u as u64]);
        let mut remaining: Vec<u32> = items.to_vec();

        let test_item = match policy {
            SplitPolicy::Latest => {
                // Break timestamp ties by item id so the pick is deterministic.
                *remaining
                    .iter()
                    .max_by_key(|&&v| (matrix.timestamp(u as u32, v).unwrap_or(i64::MIN), v))
                    .unwrap()
            }
            SplitPolicy::Random => remaining[rng.gen_range(0..remaining.len())],
        };
        remaining.retain(|&v| v != test_item);
        let val_item = remaining[rng.gen_range(0..remaining.len())];
        remaining.retain(|&v| v != val_item);

        test[u] = Some(test_item);
        validation[u] = Some(val_item);
        train_pairs.extend(remaining.iter().map(|&v| (u as u32, v)));

        // 99 distinct negatives from the complement of the full row.
        let interacted: HashSet<u32> = items.iter().copied().collect();
        let mut negs = Vec::with_capacity(EVAL_NEGATIVES);
        let mut taken = HashSet::new();
        while negs.len() < EVAL_NEGATIVES {
            let v = rng.gen_range(0..m as u32);
            if !interacted.contains(&v) && taken.insert(v) {
                negs.push(v);
            }
        }
        eval_negatives[u] = negs;
    }

    let train = InteractionMatrix::from_pairs(n, m, &train_pairs, None)?;
    Ok(Split { train, validation, test, eval_negatives, skipped_users: skipped })
}

impl Split {
    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items()
    }

    /// Users that carry a validation/test item and negatives.
    pub fn evaluated_users(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_users()).filter(|&u| self.test[u].is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Item,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::User => write!(f, "user"),
            Side::Item => write!(f, "item"),
        }
    }
}

impl std::str::FromStr for Side {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "user" => Ok(Side::User),
            "item" => Ok(Side::Item),
            other => Err(format!("unknown side {other:?}")),
        }
    }
}

/// Binary train-partition interaction vector for one user (length M) or one
/// item (length N).
pub fn interaction_vector(split: &Split, side: Side, id: usize) -> Result<DenseArray, DataError> {
    match side {
        Side::User => {
            if id >= split.num_users() {
                return Err(DataError::IdOutOfRange {
                    side: "user",
                    id,
                    max: split.num_users(),
                });
            }
            let mut values = vec![0.0; split.num_items()];
            for &v in split.train.user_items(id) {
                values[v as usize] = 1.0;
            }
            Ok(DenseArray::vector(values).expect("binary vector is finite"))
        }
        Side::Item => {
            if id >= split.num_items() {
                return Err(DataError::IdOutOfRange {
                    side: "item",
                    id,
                    max: split.num_items(),
                });
            }
            let mut values = vec![0.0; split.num_users()];
            for &u in split.train.item_users(id) {
                values[u as usize] = 1.0;
            }
            Ok(DenseArray::vector(values).expect("binary vector is finite"))
        }
    }
}

#[derive(Debug, Clone)]
pub struct NegativeSample {
    pub items: Vec<u32>,
    /// True when the candidate pool was too small and draws were taken with
    /// replacement.
    pub with_replacement: bool,
}

/// Draw `ratio` negatives per train positive of `user`, uniformly over items
/// the user has no train interaction with.
pub fn sample_train_negatives(
    split: &Split,
    user: usize,
    ratio: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NegativeSample, DataError> {
    assert!(ratio >= 1);
    let positives = split.train.user_items(user);
    assert!(!positives.is_empty(), "user must have at least one train positive");
    let m = split.num_items();
    let requested = positives.len() * ratio;
    let pool = m - positives.len();
    if pool == 0 {
        return Err(DataError::NoNegativeCandidates { user });
    }
    let positive_set: HashSet<u32> = positives.iter().copied().collect();
    if pool < requested {
        let candidates: Vec<u32> =
            (0..m as u32).filter(|v| !positive_set.contains(v)).collect();
        let items = (0..requested)
            .map(|_| candidates[rng.gen_range(0..candidates.len())])
            .collect();
        return Ok(NegativeSample { items, with_replacement: true });
    }
    let mut taken = HashSet::with_capacity(requested);
    let mut items = Vec::with_capacity(requested);
    while items.len() < requested {
        let v = rng.gen_range(0..m as u32);
        if !positive_set.contains(&v) && taken.insert(v) {
            items.push(v);
        }
    }
    Ok(NegativeSample { items, with_replacement: false })
}

/// Flip exactly `round(level * len)` distinct entries of a binary vector.
pub fn inject_noise(
    vector: &DenseArray,
    level: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DenseArray, DataError> {
    if !(0.0..=1.0).contains(&level) {
        return Err(DataError::BadNoiseLevel(level));
    }
    if let Some(i) = vector.values().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(DataError::NotBinary(i));
    }
    let len = vector.len();
    let flips = (level * len as f64).round() as usize;
    let mut out = vector.values().to_vec();
    let positions = rand::seq::index::sample(rng, len, flips);
    for p in positions {
        out[p] = 1.0 - out[p];
    }
    Ok(DenseArray::vector(out).expect("flipped vector is finite"))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub policy: SplitPolicy,
    pub format: Format,
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub source: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub fn save_split(split: &Split, manifest: &SplitManifest, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let write_pairs = |name: &str, pairs: &mut dyn Iterator<Item = (u32, u32)>| -> Result<(), DataError> {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        for (u, v) in pairs {
            writeln!(f, "{u}\t{v}").map_err(io_err(&path))?;
        }
        Ok(())
    };
    write_pairs("train.txt", &mut split.train.pairs())?;
    write_pairs(
        "validation.txt",
        &mut split
            .validation
            .iter()
            .enumerate()
            .filter_map(|(u, v)| v.map(|v| (u as u32, v))),
    )?;
    write_pairs(
        "test.txt",
        &mut split.test.iter().enumerate().filter_map(|(u, v)| v.map(|v| (u as u32, v))),
    )?;

    let neg_path = dir.join("negatives.txt");
    let mut f = fs::File::create(&neg_path).map_err(io_err(&neg_path))?;
    for (u, negs) in split.eval_negatives.iter().enumerate() {
        if negs.is_empty() {
            continue;
        }
        let joined: Vec<String> = negs.iter().map(u32::to_string).collect();
        writeln!(f, "{u}\t{}", joined.join(",")).map_err(io_err(&neg_path))?;
    }

    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    Ok(())
}

pub fn load_split(dir: impl AsRef<Path>) -> Result<(Split, SplitManifest), DataError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let manifest: SplitManifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path)
            .map_err(|_| DataError::MissingSplitFile(dir.display().to_string(), "manifest.json".into()))?,
    )
    .map_err(|e| DataError::Malformed { line: 0, detail: format!("manifest: {e}") })?;
    let (n, m) = (manifest.num_users, manifest.num_items);

    let read_pairs = |name: &str| -> Result<Vec<(u32, u32)>, DataError> {
        let path = dir.join(name);
        let f = fs::File::open(&path)
            .map_err(|_| DataError::MissingSplitFile(dir.display().to_string(), name.into()))?;
        let mut pairs = Vec::new();
        for (idx, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            let mut it = line.split('\t');
            let parse = |s: Option<&str>| {
                s.and_then(|s| s.parse::<u32>().ok()).ok_or(DataError::Malformed {
                    line: idx + 1,
                    detail: format!("bad pair in {name}"),
                })
            };
            pairs.push((parse(it.next())?, parse(it.next())?));
        }
        Ok(pairs)
    };

    let train = InteractionMatrix::from_pairs(n, m, &read_pairs("train.txt")?, None)?;
    let mut validation = vec![None; n];
    for (u, v) in read_pairs("validation.txt")? {
        validation[u as usize] = Some(v);
    }
    let mut test = vec![None; n];
    for (u, v) in read_pairs("test.txt")? {
        test[u as usize] = Some(v);
    }

    let mut eval_negatives = vec![Vec::new(); n];
    let neg_path = dir.join("negatives.txt");
    let f = fs::File::open(&neg_path)
        .map_err(|_| DataError::MissingSplitFile(dir.display().to_string(), "negatives.txt".into()))?;
    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(&neg_path))?;
        let (u, rest) = line.split_once('\t').ok_or(DataError::Malformed {
            line: idx + 1,
            detail: "bad negatives line".into(),
        })?;
        let u: usize = u.parse().map_err(|_| DataError::Malformed {
            line: idx + 1,
            detail: "bad user id".into(),
        })?;
        eval_negatives[u] = rest
            .split(',')
            .map(|s| {
                s.parse::<u32>().map_err(|_| DataError::Malformed {
                    line: idx + 1,
                    detail: "bad item id".into(),
                })
            })
            .collect::<Result<_, _>>()?;
    }

    let skipped_users =
        (0..n as u32).filter(|&u| test[u as usize].is_none()).collect();
    Ok((Split { train, validation, test, eval_negatives, skipped_users }, manifest))
}

/// Shuffle helper used by the training loop; lives here so batch assembly and
/// split logic share one RNG discipline.
pub fn shuffled<T: Clone>(items: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut out = items.to_vec();
    out.shuffle(rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn toy_matrix() -> InteractionMatrix {
        // 4 users x 6 items, timestamps increasing with item id
        let pairs: Vec<(u32, u32)> = vec![
            (0, 0), (0, 1), (0, 2), (0, 3),
            (1, 1), (1, 2), (1, 4),
            (2, 0), (2, 2), (2, 3), (2, 5),
            (3, 0), (3, 1), (3, 5),
        ];
        let ts: HashMap<(u32, u32), i64> =
            pairs.iter().map(|&(u, v)| ((u, v), 10 * (v as i64 + 1))).collect();
        InteractionMatrix::from_pairs(4, 6, &pairs, Some(&ts)).unwrap()
    }

    #[test]
    fn duplicate_pair_counts_once() {
        let m = InteractionMatrix::from_pairs(2, 2, &[(0, 1), (0, 1), (1, 0)], None).unwrap();
        assert_eq!(m.num_interactions(), 2);
        assert_eq!(m.user_items(0), &[1]);
    }

    #[test]
    fn row_and_column_views_agree() {
        let m = toy_matrix();
        let from_rows: HashSet<(u32, u32)> = m.pairs().collect();
        let mut from_cols = HashSet::new();
        for v in 0..m.num_items() {
            for &u in m.item_users(v) {
                from_cols.insert((u, v as u32));
            }
        }
        assert_eq!(from_rows, from_cols);
    }

    #[test]
    fn parse_tab_and_double_colon() {
        let tab = parse_records("1\t2\t5\t100\n3\t4\t1\t200\n", Format::MovielensTab).unwrap();
        assert_eq!(tab.len(), 2);
        assert_eq!(tab[0].timestamp, Some(100));
        let dc = parse_records("1::2::5::100\n", Format::MovielensDoubleColon).unwrap();
        assert_eq!(dc[0].user, "1");
        assert_eq!(dc[0].item, "2");
    }

    #[test]
    fn parse_csv_with_header() {
        let recs =
            parse_records("user_id,item_id,rating,timestamp\n7,9,4,50\n", Format::Csv).unwrap();
        assert_eq!(recs[0].user, "7");
        assert_eq!(recs[0].item, "9");
        assert_eq!(recs[0].timestamp, Some(50));
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse_records("1\t2\t3\t4\nbroken\n", Format::MovielensTab).unwrap_err();
        match err {
            DataError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn iterative_filter_reaches_fixpoint() {
        // item "b" has one rating; dropping it pushes user "2" under threshold
        let text = "1,a\n1,b\n1,c\n2,b\n2,c\n3,a\n3,c\n";
        let recs = parse_records(&format!("user,item\n{text}"), Format::Csv).unwrap();
        let m = build_matrix(&recs, 2, 2).unwrap();
        for u in 0..m.num_users() {
            assert!(m.user_items(u).len() >= 2);
        }
        for v in 0..m.num_items() {
            assert!(m.item_users(v).len() >= 2);
        }
    }

    #[test]
    fn empty_after_filter_rejected() {
        let recs = parse_records("user,item\n1,a\n", Format::Csv).unwrap();
        assert!(matches!(build_matrix(&recs, 5, 5), Err(DataError::EmptyAfterFilter)));
    }

    #[test]
    fn latest_policy_picks_max_timestamp() {
        let pairs = vec![(0, 0), (0, 1), (0, 2)];
        let ts: HashMap<(u32, u32), i64> =
            [((0, 0), 10), ((0, 1), 30), ((0, 2), 20)].into_iter().collect();
        let m = InteractionMatrix::from_pairs(1, 200, &pairs, Some(&ts)).unwrap();
        let split = leave_one_out_split(&m, SplitPolicy::Latest, 1).unwrap();
        assert_eq!(split.test[0], Some(1));
    }

    #[test]
    fn latest_policy_without_timestamps_rejected() {
        let m = InteractionMatrix::from_pairs(1, 200, &[(0, 0), (0, 1), (0, 2)], None).unwrap();
        assert!(matches!(
            leave_one_out_split(&m, SplitPolicy::Latest, 1),
            Err(DataError::MissingTimestamps)
        ));
    }

    #[test]
    fn three_interaction_user_keeps_one_in_train() {
        let m = InteractionMatrix::from_pairs(1, 200, &[(0, 0), (0, 1), (0, 2)], None).unwrap();
        let split = leave_one_out_split(&m, SplitPolicy::Random, 3).unwrap();
        assert_eq!(split.train.user_items(0).len(), 1);
        assert!(split.test[0].is_some());
        assert!(split.validation[0].is_some());
    }

    #[test]
    fn under_three_interactions_user_skipped() {
        let m = InteractionMatrix::from_pairs(2, 200, &[(0, 0), (0, 1), (1, 0), (1, 1), (1, 2)], None)
            .unwrap();
        let split = leave_one_out_split(&m, SplitPolicy::Random, 3).unwrap();
        assert_eq!(split.skipped_users, vec![0]);
        assert!(split.test[0].is_none());
        assert_eq!(split.train.user_items(0).len(), 2);
    }

    #[test]
    fn split_is_deterministic() {
        let m = toy_matrix();
        // toy matrix has only 6 items, too few for 99 negatives; widen it
        let pairs: Vec<(u32, u32)> = m.pairs().collect();
        let wide = InteractionMatrix::from_pairs(4, 200, &pairs, None).unwrap();
        let a = leave_one_out_split(&wide, SplitPolicy::Random, 42).unwrap();
        let b = leave_one_out_split(&wide, SplitPolicy::Random, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_partitions_are_disjoint_and_negatives_clean() {
        let pairs: Vec<(u32, u32)> = toy_matrix().pairs().collect();
        let m = InteractionMatrix::from_pairs(4, 200, &pairs, None).unwrap();
        let split = leave_one_out_split(&m, SplitPolicy::Random, 9).unwrap();
        for u in 0..4usize {
            let t = split.test[u].unwrap();
            let v = split.validation[u].unwrap();
            assert_ne!(t, v);
            assert!(!split.train.contains(u as u32, t));
            assert!(!split.train.contains(u as u32, v));
            assert_eq!(split.eval_negatives[u].len(), EVAL_NEGATIVES);
            let distinct: HashSet<u32> = split.eval_negatives[u].iter().copied().collect();
            assert_eq!(distinct.len(), EVAL_NEGATIVES);
            for &neg in &split.eval_negatives[u] {
                assert!(!m.contains(u as u32, neg));
            }
        }
    }

    #[test]
    fn interaction_vector_definition() {
        let m = InteractionMatrix::from_pairs(1, 4, &[(0, 0), (0, 2)], None).unwrap();
        let split = Split {
            train: m,
            validation: vec![None],
            test: vec![None],
            eval_negatives: vec![Vec::new()],
            skipped_users: vec![0],
        };
        let v = interaction_vector(&split, Side::User, 0).unwrap();
        assert_eq!(v.values(), &[1.0, 0.0, 1.0, 0.0]);
        // degenerate empty column is accepted
        let col = interaction_vector(&split, Side::Item, 1).unwrap();
        assert_eq!(col.values(), &[0.0]);
        assert!(interaction_vector(&split, Side::User, 5).is_err());
    }

    #[test]
    fn vector_sums_match_interaction_count() {
        let pairs: Vec<(u32, u32)> = toy_matrix().pairs().collect();
        let m = InteractionMatrix::from_pairs(4, 200, &pairs, None).unwrap();
        let split = leave_one_out_split(&m, SplitPolicy::Random, 5).unwrap();
        let total: f64 = (0..4)
            .map(|u| interaction_vector(&split, Side::User, u).unwrap().values().iter().sum::<f64>())
            .sum();
        assert_eq!(total as usize, split.train.num_interactions());
    }

    #[test]
    fn negative_count_and_exclusion() {
        let pairs: Vec<(u32, u32)> = (0..5).map(|v| (0, v)).collect();
        let m = InteractionMatrix::from_pairs(1, 300, &pairs, None).unwrap();
        let split = leave_one_out_split(&m, SplitPolicy::Random, 8).unwrap();
        let mut rng = stream(8, &[99]);
        let sample = sample_train_negatives(&split, 0, 4, &mut rng).unwrap();
        assert_eq!(sample.items.len(), split.train.user_items(0).len() * 4);
        assert!(!sample.with_replacement);
        for &v in &sample.items {
            assert!(!split.train.contains(0, v));
        }
    }

    #[test]
    fn small_pool_samples_with_replacement_uniformly() {
        // 1 positive, 3 candidate negatives, ratio far above pool size
        let m = InteractionMatrix::from_pairs(1, 4, &[(0, 0)], None).unwrap();
        let split = Split {
            train: m,
            validation: vec![None],
            test: vec![None],
            eval_negatives: vec![Vec::new()],
            skipped_users: vec![0],
        };
        let mut counts = [0usize; 4];
        let mut rng = stream(3, &[7]);
        let draws = 100_000usize;
        for _ in 0..draws / 5 {
            let s = sample_train_negatives(&split, 0, 5, &mut rng).unwrap();
            assert!(s.with_replacement);
            for &v in &s.items {
                counts[v as usize] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        // multinomial: p = 1/3, sigma = sqrt(n p (1-p))
        let n = draws as f64;
        let expected = n / 3.0;
        let sigma = (n * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - expected).abs() < 3.0 * sigma, "count {c} vs {expected}");
        }
    }

    #[test]
    fn noise_level_zero_is_identity() {
        let v = DenseArray::vector(vec![1.0, 0.0, 1.0]).unwrap();
        let mut rng = stream(0, &[1]);
        assert_eq!(inject_noise(&v, 0.0, &mut rng).unwrap(), v);
    }

    #[test]
    fn noise_flips_exact_count() {
        let v = DenseArray::vector(vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let mut rng = stream(1, &[2]);
        let noisy = inject_noise(&v, 0.5, &mut rng).unwrap();
        let hamming: usize = v
            .values()
            .iter()
            .zip(noisy.values())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(hamming, 5);
        for level in [0.1, 0.3, 0.5, 0.7, 0.9] {
            assert!(inject_noise(&v, level, &mut rng).is_ok());
        }
        assert!(inject_noise(&v, 1.5, &mut rng).is_err());
    }

    #[test]
    fn same_flip_set_twice_restores_vector() {
        let v = DenseArray::vector(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let rng0 = stream(4, &[4]);
        let noisy = inject_noise(&v, 0.5, &mut rng0.clone()).unwrap();
        let restored = inject_noise(&noisy, 0.5, &mut rng0.clone()).unwrap();
        assert_eq!(restored, v);
    }

    #[test]
    fn split_save_load_roundtrip() {
        let pairs: Vec<(u32, u32)> = toy_matrix().pairs().collect();
        let m = InteractionMatrix::from_pairs(4, 200, &pairs, None).unwrap();
        let split = leave_one_out_split(&m, SplitPolicy::Random, 11).unwrap();
        let manifest = SplitManifest {
            seed: 11,
            policy: SplitPolicy::Random,
            format: Format::Csv,
            min_user_interactions: 1,
            min_item_interactions: 1,
            num_users: 4,
            num_items: 200,
            source: "toy".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        save_split(&split, &manifest, dir.path()).unwrap();
        let (loaded, loaded_manifest) = load_split(dir.path()).unwrap();
        assert_eq!(loaded, split);
        assert_eq!(loaded_manifest, manifest);
    }
}
