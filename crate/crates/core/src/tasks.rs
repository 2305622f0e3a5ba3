//! Task sources, N-way K-shot episodes and the labeling budget.
//!
//! A [`TaskSource`] owns an immutable example pool (generated or loaded from
//! CSV) and a partition of its classes (few-shot mode) or users (federated
//! mode) into train, validation and test splits. Episodes are pure functions
//! of `(source, seed, split, task id)`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Batch, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    SyntheticGaussian,
    SyntheticRings,
    FileBacked,
}

/// Generator settings for synthetic sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    /// Total classes across all splits.
    pub classes: usize,
    pub feature_dim: usize,
    pub sigma_between: f64,
    pub sigma_within: f64,
    /// Examples per class (per user and class in federated mode).
    pub examples_per_class: usize,
    /// Users; zero selects few-shot mode.
    pub users: usize,
    /// Scale of the per-user shift of class centers in federated mode.
    pub user_shift: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            classes: 100,
            feature_dim: 16,
            sigma_between: 3.0,
            sigma_within: 1.0,
            examples_per_class: 20,
            users: 0,
            user_shift: 0.0,
        }
    }
}

impl SyntheticParams {
    /// Federated preset: `classes` fixed for every task, one shard per user.
    pub fn federated(classes: usize, users: usize) -> Self {
        Self {
            classes,
            users,
            user_shift: 2.0,
            ..Self::default()
        }
    }
}

/// Fractions of classes (or users) assigned to train / validation; the
/// remainder goes to test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            validation: 0.2,
        }
    }
}

/// Materialized examples shared by all splits of a source.
#[derive(Debug)]
struct Pool {
    features: Matrix,
    class_of: Vec<usize>,
    user_of: Option<Vec<usize>>,
    n_classes: usize,
    n_users: usize,
    /// `by_group[g][c]`: rows of class `c` owned by group `g`. In few-shot
    /// mode there is a single group.
    by_group: Vec<Vec<Vec<usize>>>,
    /// Split of each class (few-shot) or user (federated).
    split_of: Vec<Split>,
}

impl Pool {
    fn build(
        features: Matrix,
        class_of: Vec<usize>,
        user_of: Option<Vec<usize>>,
        fractions: SplitFractions,
        seed: u64,
    ) -> Result<Self> {
        let n_classes = class_of.iter().max().map_or(0, |m| m + 1);
        let n_users = user_of
            .as_ref()
            .map_or(0, |u| u.iter().max().map_or(0, |m| m + 1));
        let groups = n_users.max(1);
        let mut by_group = vec![vec![Vec::new(); n_classes]; groups];
        for (row, &c) in class_of.iter().enumerate() {
            let g = user_of.as_ref().map_or(0, |u| u[row]);
            by_group[g][c].push(row);
        }
        let units = if user_of.is_some() { n_users } else { n_classes };
        let mut order: Vec<usize> = (0..units).collect();
        order.shuffle(&mut rng::stream(seed, "split-partition", 0));
        let n_train = (fractions.train * units as f64).round() as usize;
        let n_val = (fractions.validation * units as f64).round() as usize;
        let mut split_of = vec![Split::Test; units];
        for (rank, &u) in order.iter().enumerate() {
            split_of[u] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
        Ok(Self {
            features,
            class_of,
            user_of,
            n_classes,
            n_users,
            by_group,
            split_of,
        })
    }

    fn units_in(&self, split: Split) -> Vec<usize> {
        (0..self.split_of.len())
            .filter(|&u| self.split_of[u] == split)
            .collect()
    }
}

/// A task distribution restricted to one split.
#[derive(Debug, Clone)]
pub struct TaskSource {
    kind: SourceKind,
    split: Split,
    seed: u64,
    pool: Arc<Pool>,
}

impl TaskSource {
    pub fn synthetic(
        kind: SourceKind,
        params: &SyntheticParams,
        fractions: SplitFractions,
        seed: u64,
    ) -> Result<Self> {
        if params.classes == 0 || params.feature_dim == 0 || params.examples_per_class == 0 {
            return Err(Error::config("synthetic source needs classes, features and examples"));
        }
        let d = params.feature_dim;
        let groups = params.users.max(1);
        let mut data = Vec::new();
        let mut class_of = Vec::new();
        let mut user_of = Vec::new();
        let mut centers = Vec::with_capacity(params.classes);
        let mut radii = Vec::with_capacity(params.classes);
        for c in 0..params.classes {
            let mut r = rng::stream(seed, "class-center", c as u64);
            centers.push(normal_vec(&mut r, d, params.sigma_between));
            radii.push(r.gen_range(0.5..2.0) * params.sigma_between);
        }
        for g in 0..groups {
            let mut ur = rng::stream(seed, "user-shift", g as u64);
            let shared = normal_vec(&mut ur, d, params.user_shift);
            for c in 0..params.classes {
                let own = normal_vec(&mut ur, d, params.user_shift * 0.5);
                let mut r = rng::stream(seed, "examples", (g * params.classes + c) as u64);
                for _ in 0..params.examples_per_class {
                    match kind {
                        SourceKind::SyntheticGaussian => {
                            let noise = normal_vec(&mut r, d, params.sigma_within);
                            for k in 0..d {
                                let mut v = centers[c][k] + noise[k];
                                if params.users > 0 {
                                    v += shared[k] + own[k];
                                }
                                data.push(v);
                            }
                        }
                        SourceKind::SyntheticRings => {
                            // concentric shells: the class is its radius
                            let dir = normal_vec(&mut r, d, 1.0);
                            let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                            let noise = normal_vec(&mut r, d, 0.25 * params.sigma_within);
                            for k in 0..d {
                                let mut v = radii[c] * dir[k] / len + noise[k];
                                if params.users > 0 {
                                    v += shared[k] + own[k];
                                }
                                data.push(v);
                            }
                        }
                        SourceKind::FileBacked => {
                            return Err(Error::config("file-backed sources are loaded, not generated"))
                        }
                    }
                    class_of.push(c);
                    user_of.push(g);
                }
            }
        }
        let rows = class_of.len();
        let features = Matrix::from_vec(rows, d, data)?;
        let users = (params.users > 0).then_some(user_of);
        let pool = Pool::build(features, class_of, users, fractions, seed)?;
        Ok(Self {
            kind,
            split: Split::Train,
            seed,
            pool: Arc::new(pool),
        })
    }

    pub fn gaussian(params: &SyntheticParams, seed: u64) -> Result<Self> {
        Self::synthetic(
            SourceKind::SyntheticGaussian,
            params,
            SplitFractions::default(),
            seed,
        )
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_dim(&self) -> usize {
        self.pool.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.pool.n_classes
    }

    pub fn is_federated(&self) -> bool {
        self.pool.user_of.is_some()
    }

    /// The same distribution restricted to another split.
    pub fn with_split(&self, split: Split) -> Self {
        Self {
            split,
            ..self.clone()
        }
    }

    /// Re-seeds episode sampling and the split partition. The example pool
    /// is kept.
    pub fn with_seed(&self, seed: u64) -> Result<Self> {
        let p = &self.pool;
        let pool = Pool::build(
            p.features.clone(),
            p.class_of.clone(),
            p.user_of.clone(),
            SplitFractions::default(),
            seed,
        )?;
        Ok(Self {
            seed,
            pool: Arc::new(pool),
            ..self.clone()
        })
    }

    /// Classes (few-shot) or users (federated) of the current split.
    pub fn split_units(&self) -> Vec<usize> {
        self.pool.units_in(self.split)
    }

    /// Number of distinct tasks in this split, if finite. Federated splits
    /// have one task per user.
    pub fn task_count(&self) -> Option<usize> {
        self.is_federated().then(|| self.split_units().len())
    }

    /// Labeled example cost of one episode under the ledger's policy.
    pub fn episode_cost(ways: usize, shots: usize, query_shots: usize, counts_query: bool) -> usize {
        ways * shots + if counts_query { ways * query_shots } else { 0 }
    }

    /// Draws the task's classes and per-class row lists: query rows first,
    /// the remainder shuffled. Shared by labeled and unlabeled sampling.
    fn task_rows(
        &self,
        ways: usize,
        min_per_class: usize,
        task_id: u64,
    ) -> Result<(Vec<Vec<usize>>, Rng)> {
        if ways == 0 {
            return Err(Error::config("ways must be positive"));
        }
        let tag = format!("episode-{}", self.split.name());
        let units = self.split_units();
        let pool = &self.pool;
        let (mut r, per_class): (Rng, Vec<&Vec<usize>>) = if self.is_federated() {
            let uid = *units.get(task_id as usize).ok_or_else(|| {
                Error::config(format!(
                    "task {task_id} has no user: {} split holds {} users",
                    self.split.name(),
                    units.len()
                ))
            })?;
            if ways != pool.n_classes {
                return Err(Error::config(format!(
                    "federated tasks use all {} classes, asked for {ways}",
                    pool.n_classes
                )));
            }
            let r = rng::stream(self.seed, &tag, uid as u64);
            (r, pool.by_group[uid].iter().collect())
        } else {
            if units.len() < ways {
                return Err(Error::config(format!(
                    "{} split has {} classes, need {ways}",
                    self.split.name(),
                    units.len()
                )));
            }
            let mut r = rng::stream(self.seed, &tag, task_id);
            let chosen: Vec<usize> = units.choose_multiple(&mut r, ways).copied().collect();
            let lists = chosen.iter().map(|&c| &pool.by_group[0][c]).collect();
            (r, lists)
        };
        let mut out = Vec::with_capacity(ways);
        for (label, rows) in per_class.into_iter().enumerate() {
            if rows.len() < min_per_class {
                return Err(Error::config(format!(
                    "class {label} has {} examples, need {min_per_class}",
                    rows.len()
                )));
            }
            let mut rows = rows.clone();
            rows.shuffle(&mut r);
            out.push(rows);
        }
        Ok((out, r))
    }

    fn batch_of(&self, rows: &[(usize, usize)]) -> Result<Batch> {
        let idx: Vec<usize> = rows.iter().map(|&(r, _)| r).collect();
        let labels = rows.iter().map(|&(_, y)| y).collect();
        Batch::labeled(self.pool.features.select_rows(&idx), labels)
    }
}

fn normal_vec(r: &mut Rng, d: usize, sigma: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            sigma * z
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    /// Exactly `shots` support examples per class.
    Stratified,
    /// `ways * shots` support examples drawn uniformly from the task's pool.
    Random,
}

/// One task: labeled support and query sets with episode-local labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Batch,
    pub query: Batch,
    pub ways: usize,
    pub shots: usize,
    pub query_shots: usize,
    pub task_id: u64,
    /// Source rows behind the support and query examples.
    pub support_rows: Vec<usize>,
    pub query_rows: Vec<usize>,
}

/// Hard cap on labels revealed during meta-training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    total: usize,
    spent: usize,
    per_task: usize,
    counts_query: bool,
}

impl BudgetLedger {
    pub fn new(total: usize, per_task: usize) -> Result<Self> {
        if per_task == 0 {
            return Err(Error::config("labels per task must be positive"));
        }
        Ok(Self {
            total,
            spent: 0,
            per_task,
            counts_query: true,
        })
    }

    /// Whether query labels are charged along with support labels.
    pub fn counting_query(mut self, yes: bool) -> Self {
        self.counts_query = yes;
        self
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn spent(&self) -> usize {
        self.spent
    }

    pub fn remaining(&self) -> usize {
        self.total - self.spent
    }

    pub fn per_task(&self) -> usize {
        self.per_task
    }

    pub fn counts_query(&self) -> bool {
        self.counts_query
    }

    pub fn can_afford(&self, n: usize) -> bool {
        n <= self.remaining()
    }

    /// Debits `n` labels, all or nothing.
    pub fn charge(&mut self, n: usize) -> Result<()> {
        if !self.can_afford(n) {
            return Err(Error::Budget {
                requested: n,
                remaining: self.remaining(),
                total: self.total,
            });
        }
        self.spent += n;
        Ok(())
    }
}

/// Samples an episode. With a ledger, every revealed label is charged
/// (query labels only if the ledger counts them); evaluation callers pass
/// `None`.
#[allow(clippy::too_many_arguments)]
pub fn sample_episode(
    source: &TaskSource,
    ways: usize,
    shots: usize,
    query_shots: usize,
    strategy: SamplingStrategy,
    task_id: u64,
    ledger: Option<&mut BudgetLedger>,
) -> Result<Episode> {
    if shots == 0 {
        return Err(Error::config("shots must be positive"));
    }
    let (per_class, mut r) = source.task_rows(ways, shots + query_shots, task_id)?;
    let mut query = Vec::with_capacity(ways * query_shots);
    let mut support = Vec::with_capacity(ways * shots);
    let mut rest = Vec::new();
    for (label, rows) in per_class.iter().enumerate() {
        query.extend(rows[..query_shots].iter().map(|&i| (i, label)));
        match strategy {
            SamplingStrategy::Stratified => support.extend(
                rows[query_shots..query_shots + shots]
                    .iter()
                    .map(|&i| (i, label)),
            ),
            SamplingStrategy::Random => {
                rest.extend(rows[query_shots..].iter().map(|&i| (i, label)))
            }
        }
    }
    if strategy == SamplingStrategy::Random {
        support = rest.choose_multiple(&mut r, ways * shots).copied().collect();
    }
    if let Some(ledger) = ledger {
        let cost = support.len() + if ledger.counts_query { query.len() } else { 0 };
        ledger.charge(cost)?;
    }
    Ok(Episode {
        support: source.batch_of(&support)?,
        query: source.batch_of(&query)?,
        ways,
        shots,
        query_shots,
        task_id,
        support_rows: support.iter().map(|&(i, _)| i).collect(),
        query_rows: query.iter().map(|&(i, _)| i).collect(),
    })
}

/// Unlabeled candidate points of one task. Labels stay hidden until bought
/// through [`UnlabeledPool::request_label`].
#[derive(Debug, Clone)]
pub struct UnlabeledPool {
    features: Matrix,
    hidden: Vec<usize>,
    revealed: BTreeSet<usize>,
}

impl UnlabeledPool {
    pub fn new(features: Matrix, hidden_labels: Vec<usize>) -> Result<Self> {
        if features.rows() != hidden_labels.len() {
            return Err(Error::config("pool rows and labels differ in length"));
        }
        Ok(Self {
            features,
            hidden: hidden_labels,
            revealed: BTreeSet::new(),
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn is_revealed(&self, row: usize) -> bool {
        self.revealed.contains(&row)
    }

    pub fn revealed(&self) -> impl Iterator<Item = usize> + '_ {
        self.revealed.iter().copied()
    }

    pub fn unrevealed(&self) -> Vec<usize> {
        (0..self.len()).filter(|r| !self.revealed.contains(r)).collect()
    }

    /// Buys the label of `row`, charging one label to the ledger.
    pub fn request_label(
        &mut self,
        row: usize,
        ledger: &mut BudgetLedger,
    ) -> Result<(Vec<f64>, usize)> {
        if row >= self.len() {
            return Err(Error::Logic(format!("row {row} outside pool of {}", self.len())));
        }
        if self.revealed.contains(&row) {
            return Err(Error::Logic(format!("label of row {row} already revealed")));
        }
        ledger.charge(1)?;
        self.revealed.insert(row);
        Ok((self.features.row(row).to_vec(), self.hidden[row]))
    }

    /// Labeled batch of everything revealed so far, in request-independent
    /// row order.
    pub fn labeled_batch(&self) -> Batch {
        let idx: Vec<usize> = self.revealed.iter().copied().collect();
        Batch {
            features: self.features.select_rows(&idx),
            labels: Some(idx.iter().map(|&i| self.hidden[i]).collect()),
        }
    }
}

/// Free-function form of [`UnlabeledPool::request_label`].
pub fn request_label(
    pool: &mut UnlabeledPool,
    row: usize,
    ledger: &mut BudgetLedger,
) -> Result<(Vec<f64>, usize)> {
    pool.request_label(row, ledger)
}

/// An unlabeled task: candidate pool plus a labeled stratified query set.
#[derive(Debug, Clone)]
pub struct UnlabeledTask {
    pub pool: UnlabeledPool,
    pub query: Batch,
    pub ways: usize,
    pub task_id: u64,
}

/// Draws a task whose non-query examples form an unlabeled pool. The query
/// set is charged to the ledger if it counts query labels.
pub fn sample_unlabeled_task(
    source: &TaskSource,
    ways: usize,
    query_shots: usize,
    task_id: u64,
    ledger: Option<&mut BudgetLedger>,
) -> Result<UnlabeledTask> {
    let (per_class, _) = source.task_rows(ways, query_shots + 1, task_id)?;
    let mut query = Vec::new();
    let mut rest = Vec::new();
    for (label, rows) in per_class.iter().enumerate() {
        query.extend(rows[..query_shots].iter().map(|&i| (i, label)));
        rest.extend(rows[query_shots..].iter().map(|&i| (i, label)));
    }
    if let Some(ledger) = ledger {
        if ledger.counts_query {
            ledger.charge(query.len())?;
        }
    }
    let pool_batch = source.batch_of(&rest)?;
    Ok(UnlabeledTask {
        pool: UnlabeledPool::new(pool_batch.features, pool_batch.labels.unwrap_or_default())?,
        query: source.batch_of(&query)?,
        ways,
        task_id,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnOrder {
    ClassFirst,
    UserFirst,
}

/// Sibling `manifest.json` of a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub columns: ColumnOrder,
    pub feature_dim: usize,
}

/// Parsed dataset rows with dense ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub classes: Vec<usize>,
    pub users: Option<Vec<usize>>,
}

fn dense_ids(raw: &[u64]) -> Vec<usize> {
    let mut seen = std::collections::HashMap::new();
    raw.iter()
        .map(|&id| {
            let next = seen.len();
            *seen.entry(id).or_insert(next)
        })
        .collect()
}

/// Parses a dataset CSV (and its `manifest.json`, when present).
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = path.with_file_name("manifest.json");
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("manifest: {e}"),
        })?)
    } else {
        None
    };
    let order = manifest.as_ref().map_or(ColumnOrder::ClassFirst, |m| m.columns);
    let id_cols = match order {
        ColumnOrder::ClassFirst => 1,
        ColumnOrder::UserFirst => 2,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Io(e.to_string()))?;
    let mut width = manifest.as_ref().map(|m| m.feature_dim);
    let mut data = Vec::new();
    let mut classes = Vec::new();
    let mut users = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| Error::Parse { line, msg };
        if record.len() <= id_cols {
            return Err(bad(format!("expected at least {} columns", id_cols + 1)));
        }
        let d = record.len() - id_cols;
        match width {
            None => width = Some(d),
            Some(w) if w != d => return Err(bad(format!("{d} features, expected {w}"))),
            _ => {}
        }
        let parse_id = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| bad(format!("invalid id {s:?}")))
        };
        let (user, class) = match order {
            ColumnOrder::ClassFirst => (None, parse_id(&record[0])?),
            ColumnOrder::UserFirst => (Some(parse_id(&record[0])?), parse_id(&record[1])?),
        };
        classes.push(class);
        if let Some(u) = user {
            users.push(u);
        }
        for field in record.iter().skip(id_cols) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("invalid feature {field:?}")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite feature {field:?}")));
            }
            data.push(v);
        }
    }
    let Some(width) = width.filter(|_| !classes.is_empty()) else {
        return Err(Error::Parse {
            line: 1,
            msg: "empty dataset".into(),
        });
    };
    Ok(Dataset {
        features: Matrix::from_vec(classes.len(), width, data)?,
        classes: dense_ids(&classes),
        users: (order == ColumnOrder::UserFirst).then(|| dense_ids(&users)),
    })
}

/// Loads a CSV dataset as a file-backed source (seed 0, default split
/// fractions, train split).
pub fn load_dataset(path: &Path) -> Result<TaskSource> {
    TaskSource::from_dataset(read_dataset(path)?, SplitFractions::default(), 0)
}

impl TaskSource {
    pub fn from_dataset(ds: Dataset, fractions: SplitFractions, seed: u64) -> Result<Self> {
        let pool = Pool::build(ds.features, ds.classes, ds.users, fractions, seed)?;
        Ok(Self {
            kind: SourceKind::FileBacked,
            split: Split::Train,
            seed,
            pool: Arc::new(pool),
        })
    }

    /// The whole example pool as a dataset, e.g. for export.
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            features: self.pool.features.clone(),
            classes: self.pool.class_of.clone(),
            users: self.pool.user_of.clone(),
        }
    }

    /// Number of users (zero in few-shot mode).
    pub fn user_count(&self) -> usize {
        self.pool.n_users
    }
}

/// Writes a dataset in the CSV layout read by [`read_dataset`]. Federated
/// datasets also get a `manifest.json` next to the file.
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = Vec::new();
    for (i, row) in ds.features.row_iter().enumerate() {
        if let Some(users) = &ds.users {
            write!(out, "{},", users[i])?;
        }
        write!(out, "{}", ds.classes[i])?;
        for v in row {
            // Display for f64 is the shortest exact round-trip form
            write!(out, ",{v}")?;
        }
        out.push(b'\n');
    }
    fs::write(path, out)?;
    if ds.users.is_some() {
        let manifest = Manifest {
            columns: ColumnOrder::UserFirst,
            feature_dim: ds.features.cols(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
        fs::write(path.with_file_name("manifest.json"), text)?;
    }
    Ok(())
}
