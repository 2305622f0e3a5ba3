//! Budgeted active meta-learning: embedding clustering, entropy-weighted
//! label selection with interleaved re-adaptation, and the outer loop that
//! buys one task every few steps.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adaptation::{compute_prototypes, gd_adapt, predict_probs, proto_predict};
use crate::error::{Error, Result};
use crate::meta::{
    meta_step, resample_indices, training_task_id, CurvePoint, MetaConfig, MetaState, Method,
};
use crate::rng::{self, Rng};
use crate::tasks::{sample_unlabeled_task, BudgetLedger, Episode, TaskSource, UnlabeledPool};
use crate::tensor::{embed, squared_distance, Batch, Matrix, NetworkSpec, ParamVector};

/// Tolerance on the total mass of a probability vector.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    #[default]
    Active,
    /// Uniformly random rows; no clustering, scoring or re-adaptation.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// Each cluster's whole quota is drawn before re-adapting.
    #[default]
    PerCluster,
    /// One label at a time, clusters visited round-robin.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveConfig {
    pub labels_per_task: usize,
    pub clusters: usize,
    /// Outer steps between task acquisitions.
    pub acquisition_period: usize,
    pub lloyd_iterations: usize,
    pub strategy: SelectionStrategy,
    pub granularity: Granularity,
}

impl ActiveConfig {
    /// One cluster per class.
    pub fn new(labels_per_task: usize, ways: usize) -> Self {
        Self {
            labels_per_task,
            clusters: ways,
            acquisition_period: 1,
            lloyd_iterations: 10,
            strategy: SelectionStrategy::Active,
            granularity: Granularity::PerCluster,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels_per_task == 0 || self.clusters == 0 {
            return Err(Error::config("labels per task and cluster count must be positive"));
        }
        if self.clusters > self.labels_per_task {
            return Err(Error::config(format!(
                "{} clusters exceed {} labels per task",
                self.clusters, self.labels_per_task
            )));
        }
        if self.acquisition_period == 0 {
            return Err(Error::config("acquisition period must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub centers: Matrix,
    pub members: Vec<Vec<usize>>,
    pub sse: f64,
    /// SSE after the initial assignment and after every Lloyd iteration.
    pub sse_trace: Vec<f64>,
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = squared_distance(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &Matrix, centers: &[Vec<f64>]) -> (Vec<Vec<usize>>, f64) {
    let mut members = vec![Vec::new(); centers.len()];
    let mut sse = 0.0;
    for (i, p) in points.row_iter().enumerate() {
        let (j, d) = nearest(p, centers);
        members[j].push(i);
        sse += d;
    }
    (members, sse)
}

/// Index drawn with probability proportional to `weights`; uniform when
/// every weight is zero.
pub fn sample_proportional(weights: &[f64], r: &mut Rng) -> Result<usize> {
    if weights.is_empty() {
        return Err(Error::config("cannot sample from an empty set"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Validation("sampling weights must be finite and non-negative".into()));
    }
    match WeightedIndex::new(weights) {
        Ok(d) => Ok(d.sample(r)),
        Err(_) => Ok(r.gen_range(0..weights.len())),
    }
}

/// k-means++ seeding followed by `lloyd_iterations` Lloyd refinements.
pub fn kmeanspp_cluster(
    points: &Matrix,
    k: usize,
    lloyd_iterations: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::config(format!("cannot form {k} clusters from {n} points")));
    }
    let mut r = rng::stream(seed, "kmeans", 0);
    let mut centers = vec![points.row(r.gen_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = points
        .row_iter()
        .map(|p| squared_distance(p, &centers[0]))
        .collect();
    while centers.len() < k {
        let i = sample_proportional(&d2, &mut r)?;
        let c = points.row(i).to_vec();
        for (d, p) in d2.iter_mut().zip(points.row_iter()) {
            *d = d.min(squared_distance(p, &c));
        }
        centers.push(c);
    }
    let (mut members, mut sse) = assign(points, &centers);
    let mut sse_trace = vec![sse];
    for _ in 0..lloyd_iterations {
        for (c, m) in centers.iter_mut().zip(&members) {
            if m.is_empty() {
                continue;
            }
            c.iter_mut().for_each(|v| *v = 0.0);
            for &i in m {
                for (v, x) in c.iter_mut().zip(points.row(i)) {
                    *v += x;
                }
            }
            c.iter_mut().for_each(|v| *v /= m.len() as f64);
        }
        (members, sse) = assign(points, &centers);
        sse_trace.push(sse);
    }
    Ok(ClusterAssignment {
        centers: Matrix::from_rows(&centers, points.cols())?,
        members,
        sse,
        sse_trace,
    })
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> Result<f64> {
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Validation(
            "probabilities must be finite and non-negative".into(),
        ));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::Validation(format!("probabilities sum to {total}, not 1")));
    }
    Ok(-probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

/// Per-cluster label quotas: `⌊L/|C|⌋` each, the remainder to the clusters
/// of highest mean entropy, then any quota above a cluster's capacity moved
/// to the next clusters in mean-entropy order.
pub fn allocate_quotas(labels: usize, mean_entropy: &[f64], capacity: &[usize]) -> Result<Vec<usize>> {
    let k = mean_entropy.len();
    if k == 0 || capacity.len() != k {
        return Err(Error::config("quota allocation needs one capacity per cluster"));
    }
    let total: usize = capacity.iter().sum();
    if total < labels {
        return Err(Error::config(format!(
            "{labels} labels requested from {total} unlabeled points"
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mean_entropy[b].total_cmp(&mean_entropy[a]).then(a.cmp(&b)));
    let mut quota = vec![labels / k; k];
    for &j in order.iter().take(labels % k) {
        quota[j] += 1;
    }
    let mut shortfall = 0;
    for j in 0..k {
        if quota[j] > capacity[j] {
            shortfall += quota[j] - capacity[j];
            quota[j] = capacity[j];
        }
    }
    for &j in &order {
        let take = shortfall.min(capacity[j] - quota[j]);
        quota[j] += take;
        shortfall -= take;
    }
    Ok(quota)
}

/// The learner whose uncertainty drives selection.
#[derive(Debug, Clone, Copy)]
pub struct Learner<'a> {
    pub spec: &'a NetworkSpec,
    pub theta: &'a ParamVector,
    pub cfg: &'a MetaConfig,
}

/// A model adapted to the labels bought so far.
enum Adapted {
    Params(ParamVector),
    Prototypes(crate::adaptation::PrototypeSet),
}

impl Learner<'_> {
    fn adapt(&self, labeled: &Batch) -> Result<Adapted> {
        if self.cfg.method.is_metric() {
            let e = embed(self.spec, self.theta, &labeled.features)?;
            let labels = labeled.labels.as_deref().unwrap_or(&[]);
            Ok(Adapted::Prototypes(compute_prototypes(&e, labels)?))
        } else {
            let steps = match self.cfg.method {
                Method::Fedavg => 0,
                _ => self.cfg.eval_inner_steps,
            };
            Ok(Adapted::Params(gd_adapt(
                self.spec,
                self.theta,
                labeled,
                &self.cfg.inner.with_steps(steps),
            )?))
        }
    }

    fn probabilities(&self, model: &Adapted, features: &Matrix) -> Result<Matrix> {
        match model {
            Adapted::Params(p) => predict_probs(self.spec, p, features),
            Adapted::Prototypes(protos) => {
                let e = embed(self.spec, self.theta, features)?;
                let ways = self.cfg.ways;
                let mut out = Vec::with_capacity(e.rows() * ways);
                for row in e.row_iter() {
                    out.extend(proto_predict(row, protos, ways, self.cfg.distance)?);
                }
                Matrix::from_vec(e.rows(), ways, out)
            }
        }
    }

    fn entropies(&self, model: &Adapted, pool: &UnlabeledPool, rows: &[usize]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.probabilities(model, &pool.features().select_rows(rows))?;
        p.row_iter().map(predictive_entropy).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// All labels bought, as a support batch.
    pub support: Batch,
    /// Pool rows in purchase order.
    pub rows: Vec<usize>,
    pub quotas: Vec<usize>,
    /// Re-adaptations performed after buying labels.
    pub adaptation_calls: usize,
}

/// Chooses `L` pool rows to label. Active selection clusters the
/// representations of the unlabeled rows, then per cluster samples its
/// quota with probability proportional to predictive entropy and
/// re-adapts on every label bought so far before moving on.
pub fn active_select_labels(
    pool: &mut UnlabeledPool,
    learner: Learner<'_>,
    cfg: &ActiveConfig,
    ledger: &mut BudgetLedger,
    seed: u64,
) -> Result<Selection> {
    cfg.validate()?;
    let labels = cfg.labels_per_task;
    let open = pool.unrevealed();
    if open.len() < labels {
        return Err(Error::config(format!(
            "pool has {} unlabeled rows, {labels} requested",
            open.len()
        )));
    }
    let mut r = rng::stream(seed, "select", 0);
    if cfg.strategy == SelectionStrategy::Uniform {
        let picks: Vec<usize> = open.choose_multiple(&mut r, labels).copied().collect();
        for &row in &picks {
            pool.request_label(row, ledger)?;
        }
        return Ok(Selection {
            support: pool.labeled_batch(),
            rows: picks,
            quotas: vec![labels],
            adaptation_calls: 0,
        });
    }

    let reps = embed(learner.spec, learner.theta, &pool.features().select_rows(&open))?;
    let clusters = kmeanspp_cluster(&reps, cfg.clusters, cfg.lloyd_iterations, seed)?;
    let mut members: Vec<Vec<usize>> = clusters
        .members
        .iter()
        .map(|m| m.iter().map(|&i| open[i]).collect())
        .collect();

    let mut model = learner.adapt(&pool.labeled_batch())?;
    let mean_entropy: Vec<f64> = members
        .iter()
        .map(|m| {
            let h = learner.entropies(&model, pool, m)?;
            Ok(if h.is_empty() {
                0.0
            } else {
                h.iter().sum::<f64>() / h.len() as f64
            })
        })
        .collect::<Result<_>>()?;
    let capacity: Vec<usize> = members.iter().map(Vec::len).collect();
    let quotas = allocate_quotas(labels, &mean_entropy, &capacity)?;

    let mut bought = Vec::with_capacity(labels);
    let mut calls = 0;
    let mut owed = quotas.clone();
    let batch = match cfg.granularity {
        Granularity::PerCluster => usize::MAX,
        Granularity::Single => 1,
    };
    while owed.iter().any(|&q| q > 0) {
        for j in 0..members.len() {
            if owed[j] == 0 {
                continue;
            }
            let take = owed[j].min(batch);
            let mut scores = learner.entropies(&model, pool, &members[j])?;
            for _ in 0..take {
                let pick = sample_proportional(&scores, &mut r)?;
                let row = members[j].swap_remove(pick);
                scores.swap_remove(pick);
                pool.request_label(row, ledger)?;
                bought.push(row);
            }
            owed[j] -= take;
            model = learner.adapt(&pool.labeled_batch())?;
            calls += 1;
        }
    }
    Ok(Selection {
        support: pool.labeled_batch(),
        rows: bought,
        quotas,
        adaptation_calls: calls,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveOutcome {
    pub params: ParamVector,
    /// The acquired training tasks, in acquisition order.
    pub tasks: Vec<Episode>,
    /// Outer step (0-based) at which each task was acquired.
    pub acquired_at: Vec<usize>,
    pub ledger: BudgetLedger,
    pub adaptation_calls: usize,
    pub curve: Vec<CurvePoint>,
}

/// Budgeted active meta-training: every `P` outer steps, while the budget
/// allows, draw an unlabeled task, select its labels and store it; every
/// step, update on a meta-batch resampled from the stored tasks.
pub fn active_meta_train(
    spec: &NetworkSpec,
    source: &TaskSource,
    budget: usize,
    meta_cfg: &MetaConfig,
    active_cfg: &ActiveConfig,
    counts_query: bool,
    seed: u64,
) -> Result<ActiveOutcome> {
    meta_cfg.validate(spec)?;
    active_cfg.validate()?;
    let labels = active_cfg.labels_per_task;
    if budget < labels {
        return Err(Error::config(format!(
            "budget {budget} is below one task's {labels} labels"
        )));
    }
    let query_cost = if counts_query {
        meta_cfg.ways * meta_cfg.query_shots
    } else {
        0
    };
    let mut ledger = BudgetLedger::new(budget, labels + query_cost)?.counting_query(counts_query);
    let mut state = MetaState::new(ParamVector::init(spec, seed), seed);
    let mut tasks: Vec<Episode> = Vec::new();
    let mut acquired_at = Vec::new();
    let mut calls = 0;
    let mut curve = Vec::new();
    let task_cap = source.task_count().unwrap_or(usize::MAX);
    for step in 0..meta_cfg.outer_steps.max(1) {
        let due = step % active_cfg.acquisition_period == 0;
        if due && tasks.len() < task_cap && ledger.can_afford(labels + query_cost) {
            let k = tasks.len() as u64;
            let id = training_task_id(source, seed, k)?;
            let mut task = sample_unlabeled_task(
                source,
                meta_cfg.ways,
                meta_cfg.query_shots,
                id,
                Some(&mut ledger),
            )?;
            let sel = active_select_labels(
                &mut task.pool,
                Learner {
                    spec,
                    theta: &state.params,
                    cfg: meta_cfg,
                },
                active_cfg,
                &mut ledger,
                rng::derive_seed(seed, "task-select", k),
            )?;
            calls += sel.adaptation_calls;
            tasks.push(Episode {
                support: sel.support,
                query: task.query,
                ways: meta_cfg.ways,
                shots: labels / meta_cfg.ways.max(1),
                query_shots: meta_cfg.query_shots,
                task_id: id,
                support_rows: sel.rows,
                query_rows: Vec::new(),
            });
            acquired_at.push(step);
        }
        if tasks.is_empty() {
            return Err(Error::config("budget exhausted before the first task"));
        }
        if step >= meta_cfg.outer_steps {
            break;
        }
        let batch: Vec<Episode> = resample_indices(tasks.len(), meta_cfg.meta_batch, seed, step)
            .into_iter()
            .map(|i| tasks[i].clone())
            .collect();
        let (next, objective) =
            meta_step(spec, meta_cfg, &state, &batch).map_err(|e| e.at_step(step + 1))?;
        state = next;
        if meta_cfg.curve_every > 0 && (step + 1) % meta_cfg.curve_every == 0 {
            curve.push(CurvePoint {
                step: step + 1,
                objective,
            });
        }
    }
    Ok(ActiveOutcome {
        params: state.params,
        tasks,
        acquired_at,
        ledger,
        adaptation_calls: calls,
        curve,
    })
}
