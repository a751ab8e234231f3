//! Dataset parsing, few-shot task construction, and user-disjoint splits.
//!
//! Each cold-start task is one user's support set (interactions the model
//! may adapt on) and query set (interactions to predict). Users with a
//! history length inside a configured band become tasks; train/val/test
//! partitions are disjoint by user. A synthetic generator plants a known
//! modulation structure so that search quality can be measured against
//! ground truth.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::algebra;
use crate::error::{Error, Result};
use crate::modulation::ModulationExpr;
use crate::numerics::BinaryOpKind;

/// One rated (user, item) pair with dictionary-encoded categorical
/// features. Index 0 of every field is reserved for unknown values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    /// Rating on the dataset's native scale.
    pub rating: f64,
    pub user_features: Vec<usize>,
    pub item_features: Vec<usize>,
}

/// One user's few-shot recommendation problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub user_id: u64,
    pub support: Vec<Interaction>,
    pub query: Vec<Interaction>,
}

impl Task {
    /// Support and query item sets must be disjoint and all interactions
    /// must belong to the task's user.
    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() || self.query.is_empty() {
            return Err(Error::Precondition(format!(
                "task for user {} has empty support or query",
                self.user_id
            )));
        }
        let support_items: std::collections::HashSet<u64> =
            self.support.iter().map(|i| i.item_id).collect();
        for q in &self.query {
            if support_items.contains(&q.item_id) {
                return Err(Error::Precondition(format!(
                    "item {} appears in both support and query of user {}",
                    q.item_id, self.user_id
                )));
            }
        }
        if self
            .support
            .iter()
            .chain(&self.query)
            .any(|i| i.user_id != self.user_id)
        {
            return Err(Error::Precondition(format!(
                "task for user {} contains foreign interactions",
                self.user_id
            )));
        }
        Ok(())
    }

    pub fn history_len(&self) -> usize {
        self.support.len() + self.query.len()
    }
}

/// Per-field cardinalities and the rating scale of a dataset.
/// Cardinalities count known raw values; encoded indices run `0..=card`
/// with 0 reserved for unknowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub name: String,
    pub user_field_cards: Vec<usize>,
    pub item_field_cards: Vec<usize>,
    pub rating_range: (f64, f64),
}

impl DatasetSchema {
    pub fn num_fields(&self) -> usize {
        self.user_field_cards.len() + self.item_field_cards.len()
    }

    pub fn normalize(&self, rating: f64) -> f64 {
        let (lo, hi) = self.rating_range;
        (rating - lo) / (hi - lo).max(f64::EPSILON)
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        let (lo, hi) = self.rating_range;
        lo + value * (hi - lo)
    }

    /// Stable hash over the schema, stored in checkpoints so a model is
    /// only ever evaluated against the data layout it was trained on.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("schema serializes"));
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// User-disjoint train/validation/test task partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSplit {
    pub train: Vec<Task>,
    pub val: Vec<Task>,
    pub test: Vec<Task>,
    pub rng_seed: u64,
}

impl TaskSplit {
    pub fn validate(&self) -> Result<()> {
        let users = |tasks: &[Task]| -> std::collections::HashSet<u64> {
            tasks.iter().map(|t| t.user_id).collect()
        };
        let (a, b, c) = (users(&self.train), users(&self.val), users(&self.test));
        if a.intersection(&b).next().is_some()
            || a.intersection(&c).next().is_some()
            || b.intersection(&c).next().is_some()
        {
            return Err(Error::Precondition("split shares users across parts".into()));
        }
        Ok(())
    }
}

/// Dictionary encoder: per-field raw-value → dense index maps. Index 0 is
/// the reserved unknown value in every field.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DictEncoder {
    pub fields: Vec<FieldDict>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldDict {
    pub name: String,
    values: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl FieldDict {
    pub fn new(name: &str) -> Self {
        FieldDict {
            name: name.to_string(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Encode, inserting unseen values. Indices start at 1.
    pub fn encode_insert(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        self.values.push(raw.to_string());
        let i = self.values.len();
        self.index.insert(raw.to_string(), i);
        i
    }

    /// Encode without inserting; unknown values map to the reserved 0.
    pub fn encode(&self, raw: &str) -> usize {
        self.index.get(raw).copied().unwrap_or(0)
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        if index == 0 {
            None
        } else {
            self.values.get(index - 1).map(|s| s.as_str())
        }
    }

    pub fn cardinality(&self) -> usize {
        self.values.len()
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i + 1))
            .collect();
    }
}

impl DictEncoder {
    /// Persist one two-column `raw_value<TAB>index` file per field.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for field in &self.fields {
            let mut f = fs::File::create(dir.join(format!("{}.dict.tsv", field.name)))?;
            for (i, v) in field.values.iter().enumerate() {
                writeln!(f, "{}\t{}", v, i + 1)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path, field_names: &[String]) -> Result<Self> {
        let mut fields = Vec::new();
        for name in field_names {
            let path = dir.join(format!("{name}.dict.tsv"));
            let reader = BufReader::new(fs::File::open(&path)?);
            let mut field = FieldDict::new(name);
            for line in reader.lines() {
                let line = line?;
                let Some((raw, idx)) = line.rsplit_once('\t') else {
                    return Err(Error::Parse(format!("bad dictionary line in {path:?}")));
                };
                let idx: usize = idx
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad index in {path:?}")))?;
                if idx != field.values.len() + 1 {
                    return Err(Error::Parse(format!("non-contiguous indices in {path:?}")));
                }
                field.values.push(raw.to_string());
            }
            field.rebuild_index();
            fields.push(field);
        }
        Ok(DictEncoder { fields })
    }
}

/// A parsed dataset: schema, interactions, encoder, and bookkeeping
/// counts for skipped or deduplicated rows.
#[derive(Debug, Clone)]
pub struct ParsedDataset {
    pub schema: DatasetSchema,
    pub interactions: Vec<Interaction>,
    pub encoder: DictEncoder,
    pub skipped_rows: usize,
    pub duplicate_rows: usize,
}

/// Parse the MovieLens-1M `::`-delimited files. User features are gender,
/// age, occupation and zip prefix; item features are release year and
/// primary genre extracted from `movies.dat`. Unparseable or
/// metadata-less rating rows are skipped and counted; more than 1%
/// malformed rows fails hard.
pub fn parse_movielens(
    ratings_path: &Path,
    users_path: &Path,
    movies_path: &Path,
) -> Result<ParsedDataset> {
    let user_fields = ["gender", "age", "occupation", "zip"];
    let item_fields = ["year", "genre"];
    let mut encoder = DictEncoder {
        fields: user_fields
            .iter()
            .chain(item_fields.iter())
            .map(|n| FieldDict::new(n))
            .collect(),
    };

    let mut users: HashMap<u64, Vec<usize>> = HashMap::new();
    for line in read_lines(users_path)? {
        let parts: Vec<&str> = line.split("::").collect();
        if parts.len() < 5 {
            continue;
        }
        let Ok(uid) = parts[0].parse::<u64>() else {
            continue;
        };
        // Zip codes are truncated to the 3-digit prefix to keep the
        // cardinality sane.
        let zip: String = parts[4].chars().take(3).collect();
        let feats = vec![
            encoder.fields[0].encode_insert(parts[1]),
            encoder.fields[1].encode_insert(parts[2]),
            encoder.fields[2].encode_insert(parts[3]),
            encoder.fields[3].encode_insert(&zip),
        ];
        users.insert(uid, feats);
    }

    let mut items: HashMap<u64, Vec<usize>> = HashMap::new();
    for line in read_lines(movies_path)? {
        let parts: Vec<&str> = line.split("::").collect();
        if parts.len() < 3 {
            continue;
        }
        let Ok(iid) = parts[0].parse::<u64>() else {
            continue;
        };
        let title = parts[1];
        let year = title
            .rfind('(')
            .map(|i| title[i + 1..].trim_end_matches(')').to_string())
            .unwrap_or_default();
        let genre = parts[2].split('|').next().unwrap_or("").to_string();
        let feats = vec![
            encoder.fields[4].encode_insert(&year),
            encoder.fields[5].encode_insert(&genre),
        ];
        items.insert(iid, feats);
    }

    let lines = read_lines(ratings_path)?;
    if lines.is_empty() {
        return Err(Error::Data(format!("empty ratings file {ratings_path:?}")));
    }
    let total = lines.len();
    let mut malformed = 0usize;
    let mut skipped = 0usize;
    let mut duplicates = 0usize;
    // Keep the last row per (user, item).
    let mut dedup: HashMap<(u64, u64), Interaction> = HashMap::new();
    let mut order: Vec<(u64, u64)> = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split("::").collect();
        let parsed = (|| -> Option<(u64, u64, f64)> {
            if parts.len() < 3 {
                return None;
            }
            Some((
                parts[0].parse().ok()?,
                parts[1].parse().ok()?,
                parts[2].parse().ok()?,
            ))
        })();
        let Some((uid, iid, rating)) = parsed else {
            malformed += 1;
            continue;
        };
        let (Some(uf), Some(itf)) = (users.get(&uid), items.get(&iid)) else {
            skipped += 1;
            continue;
        };
        let key = (uid, iid);
        if dedup.contains_key(&key) {
            duplicates += 1;
        } else {
            order.push(key);
        }
        dedup.insert(
            key,
            Interaction {
                user_id: uid,
                item_id: iid,
                rating,
                user_features: uf.clone(),
                item_features: itf.clone(),
            },
        );
    }
    // Rows that fail to parse at all suggest the wrong file; rows whose
    // user or item lacks metadata are merely skipped and counted.
    if malformed * 100 > total {
        return Err(Error::Data(format!(
            "{malformed} of {total} rating rows malformed; wrong file?"
        )));
    }
    let interactions: Vec<Interaction> =
        order.into_iter().map(|k| dedup.remove(&k).unwrap()).collect();
    let schema = DatasetSchema {
        name: "movielens".into(),
        user_field_cards: (0..4).map(|i| encoder.fields[i].cardinality()).collect(),
        item_field_cards: (4..6).map(|i| encoder.fields[i].cardinality()).collect(),
        rating_range: (1.0, 5.0),
    };
    Ok(ParsedDataset {
        schema,
        interactions,
        encoder,
        skipped_rows: skipped + malformed,
        duplicate_rows: duplicates,
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(fs::File::open(path)?);
    // MovieLens files are latin-1; replace invalid sequences.
    let mut out = Vec::new();
    for line in reader.split(b'\n') {
        let bytes = line?;
        out.push(String::from_utf8_lossy(&bytes).trim_end().to_string());
    }
    out.retain(|l| !l.is_empty());
    Ok(out)
}

/// Role of one CSV column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    UserId,
    ItemId,
    Rating,
    UserFeat,
    ItemFeat,
}

/// Declarative column spec for [`parse_generic_csv`]: column name → role.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub dataset_name: String,
    pub columns: Vec<(String, ColumnRole)>,
    /// Rating range; inferred from the data when absent.
    pub rating_range: Option<(f64, f64)>,
}

/// Parse a headered CSV through a [`SchemaSpec`]. Categorical values are
/// dictionary-encoded; duplicate (user, item) rows keep the last
/// occurrence and are counted.
pub fn parse_generic_csv(path: &Path, spec: &SchemaSpec) -> Result<ParsedDataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut col_idx = Vec::new();
    for (name, role) in &spec.columns {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("unknown column '{name}' in {path:?}")))?;
        col_idx.push((idx, *role));
    }
    let user_feat_cols: Vec<usize> = col_idx
        .iter()
        .filter(|(_, r)| *r == ColumnRole::UserFeat)
        .map(|(i, _)| *i)
        .collect();
    let item_feat_cols: Vec<usize> = col_idx
        .iter()
        .filter(|(_, r)| *r == ColumnRole::ItemFeat)
        .map(|(i, _)| *i)
        .collect();
    let find_one = |role: ColumnRole| -> Result<usize> {
        let hits: Vec<usize> = col_idx
            .iter()
            .filter(|(_, r)| *r == role)
            .map(|(i, _)| *i)
            .collect();
        match hits.as_slice() {
            [one] => Ok(*one),
            _ => Err(Error::Data(format!(
                "schema spec must assign exactly one {role:?} column"
            ))),
        }
    };
    let user_col = find_one(ColumnRole::UserId)?;
    let item_col = find_one(ColumnRole::ItemId)?;
    let rating_col = find_one(ColumnRole::Rating)?;

    let mut encoder = DictEncoder {
        fields: user_feat_cols
            .iter()
            .chain(item_feat_cols.iter())
            .map(|&i| FieldDict::new(&headers[i]))
            .collect(),
    };

    let mut dedup: HashMap<(u64, u64), Interaction> = HashMap::new();
    let mut order = Vec::new();
    let mut duplicates = 0usize;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for record in reader.records() {
        let record = record?;
        let uid: u64 = record[user_col]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("non-integer user id '{}'", &record[user_col])))?;
        let iid: u64 = record[item_col]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("non-integer item id '{}'", &record[item_col])))?;
        let rating: f64 = record[rating_col]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("non-numeric rating '{}'", &record[rating_col])))?;
        lo = lo.min(rating);
        hi = hi.max(rating);
        let user_features: Vec<usize> = user_feat_cols
            .iter()
            .enumerate()
            .map(|(f, &c)| encoder.fields[f].encode_insert(record[c].trim()))
            .collect();
        let off = user_feat_cols.len();
        let item_features: Vec<usize> = item_feat_cols
            .iter()
            .enumerate()
            .map(|(f, &c)| encoder.fields[off + f].encode_insert(record[c].trim()))
            .collect();
        let key = (uid, iid);
        if dedup.contains_key(&key) {
            duplicates += 1;
        } else {
            order.push(key);
        }
        dedup.insert(
            key,
            Interaction {
                user_id: uid,
                item_id: iid,
                rating,
                user_features,
                item_features,
            },
        );
    }
    if order.is_empty() {
        return Err(Error::Data(format!("no data rows in {path:?}")));
    }
    let interactions: Vec<Interaction> =
        order.into_iter().map(|k| dedup.remove(&k).unwrap()).collect();
    let schema = DatasetSchema {
        name: spec.dataset_name.clone(),
        user_field_cards: (0..user_feat_cols.len())
            .map(|i| encoder.fields[i].cardinality())
            .collect(),
        item_field_cards: (0..item_feat_cols.len())
            .map(|i| encoder.fields[user_feat_cols.len() + i].cardinality())
            .collect(),
        rating_range: spec.rating_range.unwrap_or((lo, hi)),
    };
    Ok(ParsedDataset {
        schema,
        interactions,
        encoder,
        skipped_rows: 0,
        duplicate_rows: duplicates,
    })
}

/// How a user's history becomes support and query sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TaskMode {
    /// `N` interactions sampled without replacement into the support set,
    /// remainder into the query set.
    FixedSupport(usize),
    /// Random half/half per user: support gets `floor(len/2)`, query the
    /// rest.
    HalfSplit,
}

/// Group interactions by user and build tasks for users whose history
/// length lies in `[min_len, max_len]`. Returns the tasks and the number
/// of users skipped (outside the band, or history not longer than N).
pub fn build_tasks(
    interactions: &[Interaction],
    mode: TaskMode,
    min_len: usize,
    max_len: usize,
    rng_seed: u64,
) -> Result<(Vec<Task>, usize)> {
    if min_len > max_len {
        return Err(Error::Precondition(format!(
            "min_len {min_len} > max_len {max_len}"
        )));
    }
    let mut by_user: HashMap<u64, Vec<Interaction>> = HashMap::new();
    let mut user_order = Vec::new();
    for i in interactions {
        if !by_user.contains_key(&i.user_id) {
            user_order.push(i.user_id);
        }
        by_user.entry(i.user_id).or_default().push(i.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut tasks = Vec::new();
    let mut skipped = 0usize;
    for uid in user_order {
        let mut history = by_user.remove(&uid).unwrap();
        let len = history.len();
        if len < min_len || len > max_len {
            skipped += 1;
            continue;
        }
        let support_n = match mode {
            TaskMode::FixedSupport(n) => {
                if n >= len {
                    skipped += 1;
                    continue;
                }
                n
            }
            TaskMode::HalfSplit => {
                if len < 2 {
                    skipped += 1;
                    continue;
                }
                len / 2
            }
        };
        history.shuffle(&mut rng);
        let query = history.split_off(support_n);
        tasks.push(Task {
            user_id: uid,
            support: history,
            query,
        });
    }
    Ok((tasks, skipped))
}

/// Deterministic user-level shuffle and partition with largest-remainder
/// rounding. Identical seeds produce identical splits.
pub fn split_tasks(tasks: &[Task], ratios: [f64; 3], rng_seed: u64) -> Result<TaskSplit> {
    if ratios.iter().any(|&r| r <= 0.0) {
        return Err(Error::Precondition("split ratios must be positive".into()));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "split ratios must sum to 1, got {:?}",
            ratios
        )));
    }
    if tasks.len() < 10 {
        return Err(Error::Precondition(format!(
            "refusing to split only {} tasks",
            tasks.len()
        )));
    }
    let mut shuffled: Vec<Task> = tasks.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    shuffled.shuffle(&mut rng);

    let n = shuffled.len();
    let counts = largest_remainder(n, &ratios);
    let mut iter = shuffled.into_iter();
    let train: Vec<Task> = iter.by_ref().take(counts[0]).collect();
    let val: Vec<Task> = iter.by_ref().take(counts[1]).collect();
    let test: Vec<Task> = iter.collect();
    Ok(TaskSplit {
        train,
        val,
        test,
        rng_seed,
    })
}

fn largest_remainder(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remainder = n - counts.iter().sum::<usize>();
    let mut by_frac: Vec<usize> = (0..3).collect();
    by_frac.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &by_frac {
        if remainder == 0 {
            break;
        }
        counts[i] += 1;
        remainder -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Long-tail split preset: tasks with history length in
/// `[head_lo, head_hi)` go straight to train; the remainder (expected in
/// the short-history band) are split by `ratios`.
pub fn split_tasks_longtail(
    tasks: &[Task],
    head_lo: usize,
    head_hi: usize,
    ratios: [f64; 3],
    rng_seed: u64,
) -> Result<TaskSplit> {
    let (head, tail): (Vec<Task>, Vec<Task>) = tasks
        .iter()
        .cloned()
        .partition(|t| (head_lo..head_hi).contains(&t.history_len()));
    let mut split = split_tasks(&tail, ratios, rng_seed)?;
    split.train.extend(head);
    Ok(split)
}

/// Ground truth behind a synthetic dataset: the fixed generator network,
/// each user's planted parameter vectors, and the affine rating
/// transform. Ratings can be recomputed exactly (up to the added noise).
///
/// Per-user behaviour enters *only* through the planted modulation
/// parameters: the generator input is the item embedding plus a bias
/// term, so a user's ratings are fully determined by their parameter
/// vectors and can be inferred from a handful of support interactions.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub planted: ModulationExpr,
    pub emb_dim: usize,
    pub item_emb: Vec<Vec<f64>>,
    pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
    pub user_phis: Vec<Vec<Vec<f64>>>,
    /// rating = raw * scale + shift
    pub scale: f64,
    pub shift: f64,
}

impl SyntheticTruth {
    /// Noise-free rating for a (user, item) pair.
    pub fn clean_rating(&self, user: usize, item: usize) -> Result<f64> {
        let mut h: Vec<f64> = self.item_emb[item].clone();
        h.push(1.0);
        // Planted modulation applies at the input layer.
        h = algebra::eval_expr_values(&self.planted, &h, &self.user_phis[user])?;
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let mut next: Vec<f64> = w
                .iter()
                .zip(b)
                .map(|(row, bias)| {
                    row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>() + bias
                })
                .collect();
            if li + 1 < self.layers.len() {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            h = next.drain(..).collect();
        }
        Ok(h[0] * self.scale + self.shift)
    }
}

/// A generated dataset with its planted ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub schema: DatasetSchema,
    pub interactions: Vec<Interaction>,
    pub truth: SyntheticTruth,
}

/// Generate a dataset whose optimal modulation structure is `planted` by
/// construction: each item has a latent embedding that feeds a fixed
/// random MLP, and the MLP input is first modulated by `planted` with
/// user-specific parameter vectors, plus Gaussian observation noise.
/// All user-specific behaviour flows through those parameter vectors, so
/// recovering them from the support set is the only way to fit a cold
/// user. Ratings are affinely mapped to `[1, 5]`.
pub fn make_synthetic(
    planted: &ModulationExpr,
    n_users: usize,
    n_items: usize,
    noise_sd: f64,
    rng_seed: u64,
) -> Result<SyntheticDataset> {
    if noise_sd < 0.0 {
        return Err(Error::Precondition("noise_sd must be >= 0".into()));
    }
    if n_users == 0 || n_items == 0 {
        return Err(Error::Precondition("need at least one user and item".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let emb_dim = 6;
    let h0 = emb_dim + 1;
    let widths: Vec<usize> = match std::env::var("COLDNAS_TRUTH").as_deref() {
        Ok("linear") => vec![h0, 1],
        Ok("shallow") => vec![h0, 8, 1],
        _ => vec![h0, 16, 8, 1],
    };

    let randvec = |n: usize, mag: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-mag..mag)).collect()
    };
    let item_emb: Vec<Vec<f64>> = (0..n_items).map(|_| randvec(emb_dim, 1.0, &mut rng)).collect();
    let layers: Vec<(Vec<Vec<f64>>, Vec<f64>)> = (0..widths.len() - 1)
        .map(|l| {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<Vec<f64>> = (0..fan_out)
                .map(|_| randvec(fan_in, bound, &mut rng))
                .collect();
            let b = vec![0.0; fan_out];
            (w, b)
        })
        .collect();

    // Per-user planted parameter vectors. Ranges are wide so the
    // modulation dominates the rating variance: multiplicative slots stay
    // well away from zero (and from 1), additive slots are on the same
    // scale as the embedding coordinates, and clipping thresholds sit
    // inside the embedding mass (coordinates are U(-1, 1)) so the clip
    // actually binds on a substantial fraction of items.
    let nonneg = planted.nonneg_slots();
    let clip: Vec<usize> = planted
        .steps()
        .iter()
        .filter(|(op, _)| matches!(op, BinaryOpKind::Max | BinaryOpKind::Min))
        .map(|&(_, slot)| slot)
        .collect();
    let user_phis: Vec<Vec<Vec<f64>>> = (0..n_users)
        .map(|_| {
            (1..=planted.len())
                .map(|slot| {
                    (0..h0)
                        .map(|_| {
                            if nonneg.contains(&slot) {
                                rng.gen_range(0.3..3.0)
                            } else if clip.contains(&slot) {
                                rng.gen_range(0.0..0.9)
                            } else {
                                rng.gen_range(-0.5..0.5)
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut truth = SyntheticTruth {
        planted: planted.clone(),
        emb_dim,
        item_emb,
        layers,
        user_phis,
        scale: 1.0,
        shift: 0.0,
    };

    // Draw each user's history: which items and the raw scores.
    let normal = Normal::new(0.0, noise_sd.max(f64::MIN_POSITIVE)).unwrap();
    let mut raw: Vec<(usize, usize, f64)> = Vec::new();
    for u in 0..n_users {
        let history_len = rng.gen_range(80..=96).min(n_items);
        let mut items: Vec<usize> = (0..n_items).collect();
        items.shuffle(&mut rng);
        for &v in items.iter().take(history_len) {
            let mut score = truth.clean_rating(u, v)?;
            if noise_sd > 0.0 {
                score += normal.sample(&mut rng);
            }
            raw.push((u, v, score));
        }
    }
    let lo = raw.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let hi = raw.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::EPSILON);
    // Affine map raw scores onto the 1..5 rating scale; record it so
    // clean ratings can be recomputed on the same scale.
    truth.scale = 4.0 / span;
    truth.shift = 1.0 - lo * 4.0 / span;

    let interactions: Vec<Interaction> = raw
        .into_iter()
        .map(|(u, v, score)| Interaction {
            user_id: u as u64,
            item_id: v as u64,
            rating: score * truth.scale + truth.shift,
            // A single shared user feature: cold users carry no usable id
            // signal, so a model can only distinguish users through the
            // support set.
            user_features: vec![1],
            item_features: vec![v + 1],
        })
        .collect();

    let schema = DatasetSchema {
        name: "synthetic".into(),
        user_field_cards: vec![1],
        item_field_cards: vec![n_items],
        rating_range: (1.0, 5.0),
    };
    Ok(SyntheticDataset {
        schema,
        interactions,
        truth,
    })
}
