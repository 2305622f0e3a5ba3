//! Outer-loop meta-learners: Reptile, MAML (first and second order),
//! ProtoNets and FedAvg, with training/evaluation drivers and the Reptile
//! alignment diagnostic.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    compute_prototypes, distance_softmax, evaluate, gd_adapt, gd_trajectory, predict_probs,
    proto_predict, AdaptationConfig, Distance, StepSchedule, LOG_PROB_FLOOR,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::tasks::{sample_episode, BudgetLedger, Episode, SamplingStrategy, TaskSource};
use crate::tensor::{
    backward, dot, embed, forward_trace, hvp, loss_and_grad, loss_value, Head, LossSpec, Matrix,
    NetworkSpec, ParamVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Reptile,
    Maml,
    Fomaml,
    Protonet,
    Fedavg,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Reptile,
        Method::Maml,
        Method::Fomaml,
        Method::Protonet,
        Method::Fedavg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Reptile => "reptile",
            Method::Maml => "maml",
            Method::Fomaml => "fomaml",
            Method::Protonet => "protonet",
            Method::Fedavg => "fedavg",
        }
    }

    /// Methods trained on a held-out query set.
    pub fn uses_query(self) -> bool {
        matches!(self, Method::Maml | Method::Fomaml | Method::Protonet)
    }

    /// Methods whose model is an embedding compared against prototypes.
    pub fn is_metric(self) -> bool {
        self == Method::Protonet
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown method `{s}` (expected maml, fomaml, reptile, protonet or fedavg)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    First,
    Second,
}

/// Outer optimizer. The adaptive variant keeps only a second-moment
/// estimate (first-moment decay of zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OuterOptimizer {
    Sgd,
    Adam { beta2: f64, eps: f64 },
}

impl OuterOptimizer {
    pub fn adam() -> Self {
        OuterOptimizer::Adam {
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub method: Method,
    pub outer_steps: usize,
    /// Outer step size: ε for reptile/fedavg, α′ for the others.
    pub outer_schedule: StepSchedule,
    pub optimizer: OuterOptimizer,
    pub meta_batch: usize,
    pub inner: AdaptationConfig,
    /// Adaptation steps used at evaluation time.
    pub eval_inner_steps: usize,
    pub ways: usize,
    pub shots: usize,
    /// Query examples per class during training.
    pub query_shots: usize,
    pub eval_query_shots: usize,
    pub sampling: SamplingStrategy,
    pub distance: Distance,
    /// Largest network for which second-order MAML is allowed.
    pub second_order_ceiling: usize,
    /// Record the training objective every this many outer steps.
    pub curve_every: usize,
}

pub const DEFAULT_SECOND_ORDER_CEILING: usize = 10_000;

impl MetaConfig {
    /// Hyperparameters of the convolutional benchmark setup.
    pub fn conv_preset(method: Method, ways: usize, shots: usize) -> Self {
        let (inner_steps, inner_lr, eval_steps) = match method {
            Method::Reptile | Method::Fedavg => (10, 0.001, 50),
            _ => (5, 0.01, 10),
        };
        let (outer_schedule, optimizer) = match method {
            Method::Reptile | Method::Fedavg => {
                (StepSchedule::Constant { lr: 1.0 }, OuterOptimizer::Sgd)
            }
            _ => (StepSchedule::Constant { lr: 0.005 }, OuterOptimizer::adam()),
        };
        Self {
            method,
            outer_steps: 10_000,
            outer_schedule,
            optimizer,
            meta_batch: 4,
            inner: AdaptationConfig::constant(inner_steps, inner_lr, LossSpec::cross_entropy()),
            eval_inner_steps: eval_steps,
            ways,
            shots,
            query_shots: if method.uses_query() { 15 } else { 0 },
            eval_query_shots: 15,
            sampling: SamplingStrategy::Stratified,
            distance: Distance::SquaredEuclidean,
            second_order_ceiling: DEFAULT_SECOND_ORDER_CEILING,
            curve_every: 100,
        }
    }

    /// Hyperparameters for small MLPs on the synthetic sources.
    pub fn synthetic_preset(method: Method, ways: usize, shots: usize) -> Self {
        let (inner_steps, inner_lr, eval_steps) = match method {
            Method::Reptile | Method::Fedavg => (10, 0.1, 20),
            Method::Protonet => (0, 0.1, 0),
            _ => (5, 0.3, 10),
        };
        let outer_schedule = match method {
            Method::Reptile | Method::Fedavg => StepSchedule::Constant { lr: 0.5 },
            _ => StepSchedule::Constant { lr: 0.005 },
        };
        let optimizer = match method {
            Method::Reptile | Method::Fedavg => OuterOptimizer::Sgd,
            _ => OuterOptimizer::adam(),
        };
        Self {
            method,
            outer_steps: 500,
            outer_schedule,
            optimizer,
            meta_batch: 4,
            inner: AdaptationConfig::constant(inner_steps, inner_lr, LossSpec::cross_entropy()),
            eval_inner_steps: eval_steps,
            ways,
            shots,
            query_shots: if method.uses_query() { 5 } else { 0 },
            eval_query_shots: 10,
            sampling: SamplingStrategy::Stratified,
            distance: Distance::SquaredEuclidean,
            second_order_ceiling: DEFAULT_SECOND_ORDER_CEILING,
            curve_every: 50,
        }
    }

    pub fn eval_inner(&self) -> AdaptationConfig {
        self.inner.with_steps(self.eval_inner_steps)
    }

    /// Labels one training episode reveals under the given query policy.
    pub fn episode_cost(&self, counts_query: bool) -> usize {
        TaskSource::episode_cost(self.ways, self.shots, self.query_shots, counts_query)
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        self.inner.validate()?;
        if self.meta_batch == 0 {
            return Err(Error::config("meta-batch size must be positive"));
        }
        if self.ways == 0 || self.shots == 0 {
            return Err(Error::config("ways and shots must be positive"));
        }
        if self.eval_query_shots == 0 {
            return Err(Error::config("evaluation needs at least one query shot"));
        }
        if !(self.outer_schedule.base() >= 0.0) {
            return Err(Error::config("outer step size must be non-negative"));
        }
        if let OuterOptimizer::Adam { beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::config("adam needs beta2 in [0, 1) and eps > 0"));
            }
        }
        match self.method {
            Method::Reptile | Method::Fedavg if self.query_shots != 0 => {
                return Err(Error::config(format!(
                    "{} trains on support only; query shots must be 0",
                    self.method
                )))
            }
            m if m.uses_query() && self.query_shots == 0 => {
                return Err(Error::config(format!("{m} needs at least one query shot")))
            }
            _ => {}
        }
        if self.method.is_metric() {
            if spec.head() != Head::EmbeddingOnly {
                return Err(Error::config("protonet needs an embedding-only network"));
            }
        } else if spec.out_dim() != self.ways {
            return Err(Error::config(format!(
                "network has {} outputs for a {}-way task",
                spec.out_dim(),
                self.ways
            )));
        }
        if self.method == Method::Maml && spec.param_count() > self.second_order_ceiling {
            return Err(Error::config(format!(
                "second-order maml is limited to {} parameters (network has {}); use fomaml",
                self.second_order_ceiling,
                spec.param_count()
            )));
        }
        Ok(())
    }
}

/// Meta-parameters and outer-optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub params: ParamVector,
    pub step: usize,
    pub seed: u64,
    second_moment: Vec<f64>,
}

impl MetaState {
    pub fn new(params: ParamVector, seed: u64) -> Self {
        Self {
            params,
            step: 0,
            seed,
            second_moment: Vec::new(),
        }
    }
}

fn mean_of(vs: &[ParamVector], like: &ParamVector) -> Result<ParamVector> {
    let n = vs.len() as f64;
    let mut acc = vec![0.0; like.len()];
    for v in vs {
        like.same_layout(v)?;
        for (a, x) in acc.iter_mut().zip(v.values()) {
            *a += x;
        }
    }
    like.with_values(acc.into_iter().map(|a| a / n).collect())
}

fn require_episodes(episodes: &[Episode]) -> Result<()> {
    if episodes.is_empty() {
        return Err(Error::config("meta-batch holds no episodes"));
    }
    Ok(())
}

/// Adapted parameters of every episode, in episode order.
fn adapt_all(
    spec: &NetworkSpec,
    theta0: &ParamVector,
    episodes: &[Episode],
    inner: &AdaptationConfig,
) -> Result<Vec<ParamVector>> {
    episodes
        .par_iter()
        .map(|e| gd_adapt(spec, theta0, &e.support, inner))
        .collect()
}

/// `θ0 ← (1 − ε)·θ0 + ε·mean_i A_θ0(S_i)`.
pub fn reptile_meta_step(
    spec: &NetworkSpec,
    state: &MetaState,
    episodes: &[Episode],
    inner: &AdaptationConfig,
    eps: f64,
) -> Result<MetaState> {
    require_episodes(episodes)?;
    let adapted = adapt_all(spec, &state.params, episodes, inner)?;
    let mean = mean_of(&adapted, &state.params)?;
    let values = state
        .params
        .values()
        .iter()
        .zip(mean.values())
        .map(|(&p, &m)| (1.0 - eps) * p + eps * m)
        .collect();
    Ok(MetaState {
        params: state.params.with_values(values)?,
        step: state.step + 1,
        ..state.clone()
    })
}

/// Loss on `target` after adapting on `support`, and its gradient with
/// respect to the initialization. `Second` back-propagates through every
/// inner step: `v ← v − α_t·H_S(θ_{t−1})·v`.
fn unrolled_grad(
    spec: &NetworkSpec,
    theta0: &ParamVector,
    support: &crate::tensor::Batch,
    target: &crate::tensor::Batch,
    inner: &AdaptationConfig,
    order: Order,
) -> Result<(f64, ParamVector)> {
    let path = gd_trajectory(spec, theta0, support, inner)?;
    let theta_t = path.last().expect("trajectory holds θ0");
    let (loss, mut v) = loss_and_grad(spec, theta_t, target, &inner.loss)?;
    if order == Order::Second && !support.is_empty() {
        for t in (1..path.len()).rev() {
            let hv = hvp(spec, &path[t - 1], support, &inner.loss, &v)?;
            let a = inner.schedule.rate(t);
            let vals = v
                .values()
                .iter()
                .zip(hv.values())
                .map(|(&x, &h)| x - a * h)
                .collect();
            v = v.with_values(vals).map_err(|e| e.at_step(t))?;
        }
    }
    Ok((loss, v))
}

/// Query loss of the adapted model, `L_Q(A_θ0(S))`, for one episode.
pub fn maml_objective(
    spec: &NetworkSpec,
    theta0: &ParamVector,
    episode: &Episode,
    inner: &AdaptationConfig,
) -> Result<f64> {
    let theta_t = gd_adapt(spec, theta0, &episode.support, inner)?;
    loss_value(spec, &theta_t, &episode.query, &inner.loss)
}

fn maml_loss_and_grad(
    spec: &NetworkSpec,
    theta0: &ParamVector,
    episodes: &[Episode],
    inner: &AdaptationConfig,
    order: Order,
) -> Result<(f64, ParamVector)> {
    require_episodes(episodes)?;
    if let Some(e) = episodes.iter().find(|e| e.query.is_empty()) {
        return Err(Error::config(format!("episode {} has an empty query set", e.task_id)));
    }
    let parts: Vec<(f64, ParamVector)> = episodes
        .par_iter()
        .map(|e| unrolled_grad(spec, theta0, &e.support, &e.query, inner, order))
        .collect::<Result<_>>()?;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / parts.len() as f64;
    let grads: Vec<ParamVector> = parts.into_iter().map(|p| p.1).collect();
    Ok((loss, mean_of(&grads, theta0)?))
}

/// Mean meta-gradient of the query loss over the episodes.
pub fn maml_meta_grad(
    spec: &NetworkSpec,
    theta0: &ParamVector,
    episodes: &[Episode],
    inner: &AdaptationConfig,
    order: Order,
) -> Result<ParamVector> {
    Ok(maml_loss_and_grad(spec, theta0, episodes, inner, order)?.1)
}

struct Embedded {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl Embedded {
    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

fn protonet_generic(
    spec: &NetworkSpec,
    theta: &ParamVector,
    episode: &Episode,
    distance: Distance,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if spec.head() != Head::EmbeddingOnly {
        return Err(Error::config("protonet needs an embedding-only network"));
    }
    let (support, query) = (&episode.support, &episode.query);
    if support.is_empty() || query.is_empty() {
        return Err(Error::config("protonet episodes need support and query examples"));
    }
    spec.check_params(theta)?;
    spec.check_input(support.features.cols())?;
    let s_labels = support.require_labels()?;
    let q_labels = query.require_labels()?;
    let dim = spec.out_dim();
    let ts = forward_trace(spec, theta.values(), support.features.as_slice().to_vec(), support.len());
    let tq = forward_trace(spec, theta.values(), query.features.as_slice().to_vec(), query.len());
    let es = Embedded {
        rows: support.len(),
        dim,
        values: ts.output().to_vec(),
    };
    let eq = Embedded {
        rows: query.len(),
        dim,
        values: tq.output().to_vec(),
    };
    let protos = compute_prototypes(
        &Matrix::from_vec(es.rows, dim, es.values.clone())?,
        s_labels,
    )?;
    let classes: Vec<usize> = protos.present_classes().collect();
    let counts: Vec<usize> = classes
        .iter()
        .map(|&c| s_labels.iter().filter(|&&y| y == c).count())
        .collect();
    let inv_q = 1.0 / eq.rows as f64;
    let mut loss = 0.0;
    let mut gq = vec![0.0; eq.rows * dim];
    let mut gc = vec![vec![0.0; dim]; classes.len()];
    for (r, &y) in q_labels.iter().enumerate() {
        let q = eq.row(r);
        let Some(yi) = classes.iter().position(|&c| c == y) else {
            loss -= LOG_PROB_FLOOR;
            continue;
        };
        let d: Vec<f64> = protos.iter().map(|(_, c)| distance.eval(q, c)).collect();
        let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
        let lse = d.iter().map(|v| (dmin - v).exp()).sum::<f64>().ln();
        loss += (d[yi] - dmin) + lse;
        if !want_grad {
            continue;
        }
        let p = distance_softmax(&d);
        for (k, (_, c)) in protos.iter().enumerate() {
            // dL/dd_k = 1[k = y] − p_k
            let w = (if k == yi { 1.0 } else { 0.0 } - p[k]) * inv_q;
            let scale = match distance {
                Distance::SquaredEuclidean => 2.0,
                Distance::Euclidean if d[k] > 0.0 => 1.0 / d[k],
                Distance::Euclidean => 0.0,
            };
            for j in 0..dim {
                let diff = scale * (q[j] - c[j]);
                gq[r * dim + j] += w * diff;
                gc[k][j] -= w * diff;
            }
        }
    }
    let loss = loss * inv_q;
    if !loss.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            detail: "non-finite prototype loss".into(),
        });
    }
    if !want_grad {
        return Ok((loss, None));
    }
    let mut gs = vec![0.0; es.rows * dim];
    for (r, &y) in s_labels.iter().enumerate() {
        let k = classes.iter().position(|&c| c == y).expect("support class has a prototype");
        for j in 0..dim {
            gs[r * dim + j] = gc[k][j] / counts[k] as f64;
        }
    }
    let mut grad = backward(spec, theta.values(), &tq, gq);
    for (g, h) in grad.iter_mut().zip(backward(spec, theta.values(), &ts, gs)) {
        *g += h;
    }
    Ok((loss, Some(grad)))
}

/// Mean query cross-entropy of the prototype classifier built from the
/// support set.
pub fn protonet_loss(
    spec: &NetworkSpec,
    theta: &ParamVector,
    episode: &Episode,
    distance: Distance,
) -> Result<f64> {
    Ok(protonet_generic(spec, theta, episode, distance, false)?.0)
}

pub fn protonet_loss_and_grad(
    spec: &NetworkSpec,
    theta: &ParamVector,
    episode: &Episode,
    distance: Distance,
) -> Result<(f64, ParamVector)> {
    let (l, g) = protonet_generic(spec, theta, episode, distance, true)?;
    Ok((l, theta.with_values(g.expect("gradient requested"))?))
}

fn protonet_batch(
    spec: &NetworkSpec,
    theta: &ParamVector,
    episodes: &[Episode],
    distance: Distance,
) -> Result<(f64, ParamVector)> {
    require_episodes(episodes)?;
    let parts: Vec<(f64, ParamVector)> = episodes
        .par_iter()
        .map(|e| protonet_loss_and_grad(spec, theta, e, distance))
        .collect::<Result<_>>()?;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / parts.len() as f64;
    let grads: Vec<ParamVector> = parts.into_iter().map(|p| p.1).collect();
    Ok((loss, mean_of(&grads, theta)?))
}

pub fn protonet_meta_grad(
    spec: &NetworkSpec,
    theta: &ParamVector,
    episodes: &[Episode],
    distance: Distance,
) -> Result<ParamVector> {
    Ok(protonet_batch(spec, theta, episodes, distance)?.1)
}

fn apply_gradient(cfg: &MetaConfig, state: &MetaState, grad: &ParamVector) -> Result<MetaState> {
    let t = state.step + 1;
    let lr = cfg.outer_schedule.rate(t);
    let mut next = state.clone();
    next.step = t;
    let p = state.params.values();
    let g = grad.values();
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            step: t,
            detail: format!("non-finite meta-gradient at coordinate {i}"),
        });
    }
    let values: Vec<f64> = match cfg.optimizer {
        OuterOptimizer::Sgd => p.iter().zip(g).map(|(&p, &g)| p - lr * g).collect(),
        OuterOptimizer::Adam { beta2, eps } => {
            if next.second_moment.len() != p.len() {
                next.second_moment = vec![0.0; p.len()];
            }
            let correction = 1.0 - beta2.powi(t.min(i32::MAX as usize) as i32);
            p.iter()
                .zip(g)
                .zip(next.second_moment.iter_mut())
                .map(|((&p, &g), v)| {
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    p - lr * g / ((*v / correction).sqrt() + eps)
                })
                .collect()
        }
    };
    next.params = state.params.with_values(values).map_err(|e| e.at_step(t))?;
    Ok(next)
}

/// One outer update of the configured method. Returns the new state and
/// the objective value the method optimizes, measured before the update.
pub fn meta_step(
    spec: &NetworkSpec,
    cfg: &MetaConfig,
    state: &MetaState,
    episodes: &[Episode],
) -> Result<(MetaState, f64)> {
    require_episodes(episodes)?;
    let theta = &state.params;
    match cfg.method {
        Method::Reptile | Method::Fedavg => {
            let adapted = adapt_all(spec, theta, episodes, &cfg.inner)?;
            let objective = episodes
                .iter()
                .zip(&adapted)
                .map(|(e, a)| loss_value(spec, a, &e.support, &cfg.inner.loss))
                .sum::<Result<f64>>()?
                / episodes.len() as f64;
            let mean = mean_of(&adapted, theta)?;
            let next = match cfg.optimizer {
                OuterOptimizer::Sgd => {
                    let eps = cfg.outer_schedule.rate(state.step + 1);
                    let values = theta
                        .values()
                        .iter()
                        .zip(mean.values())
                        .map(|(&p, &m)| (1.0 - eps) * p + eps * m)
                        .collect();
                    MetaState {
                        params: theta.with_values(values)?,
                        step: state.step + 1,
                        ..state.clone()
                    }
                }
                OuterOptimizer::Adam { .. } => {
                    let dir = theta.with_values(
                        theta
                            .values()
                            .iter()
                            .zip(mean.values())
                            .map(|(&p, &m)| p - m)
                            .collect(),
                    )?;
                    apply_gradient(cfg, state, &dir)?
                }
            };
            Ok((next, objective))
        }
        Method::Maml | Method::Fomaml => {
            let order = if cfg.method == Method::Maml {
                Order::Second
            } else {
                Order::First
            };
            let (loss, g) = maml_loss_and_grad(spec, theta, episodes, &cfg.inner, order)?;
            Ok((apply_gradient(cfg, state, &g)?, loss))
        }
        Method::Protonet => {
            let (loss, g) = protonet_batch(spec, theta, episodes, cfg.distance)?;
            Ok((apply_gradient(cfg, state, &g)?, loss))
        }
    }
}

/// How training tasks are obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum Regime {
    /// Fresh tasks every outer step, no budget.
    Classical,
    /// Tasks are bought once under the ledger (and an optional cap on the
    /// number of unique tasks), then resampled with replacement.
    Limited {
        ledger: BudgetLedger,
        task_limit: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub curve: Vec<CurvePoint>,
    /// Every task id that entered a meta-batch.
    pub tasks_used: BTreeSet<u64>,
    /// Labels revealed to the learner.
    pub labels_spent: usize,
    pub ledger: Option<BudgetLedger>,
    pub outer_steps: usize,
}

/// Task id of the `k`-th training task drawn in a run.
pub(crate) fn training_task_id(source: &TaskSource, seed: u64, k: u64) -> Result<u64> {
    match source.task_count() {
        Some(0) => Err(Error::config("training split holds no tasks")),
        Some(n) => {
            let mut order: Vec<u64> = (0..n as u64).collect();
            order.shuffle(&mut rng::stream(seed, "task-order", k / n as u64));
            Ok(order[(k % n as u64) as usize])
        }
        None => Ok(rng::derive_seed(seed, "train-task", k)),
    }
}

/// Buys tasks under the ledger until it runs dry or the task cap is hit.
pub fn acquire_tasks(
    source: &TaskSource,
    cfg: &MetaConfig,
    ledger: &mut BudgetLedger,
    task_limit: Option<usize>,
    seed: u64,
) -> Result<Vec<Episode>> {
    let cost = cfg.episode_cost(ledger.counts_query());
    let mut cap = task_limit.unwrap_or(usize::MAX);
    if let Some(n) = source.task_count() {
        cap = cap.min(n);
    }
    let mut out = Vec::new();
    while out.len() < cap && ledger.can_afford(cost) {
        let id = training_task_id(source, seed, out.len() as u64)?;
        out.push(sample_episode(
            source,
            cfg.ways,
            cfg.shots,
            cfg.query_shots,
            cfg.sampling,
            id,
            Some(ledger),
        )?);
    }
    if out.is_empty() {
        return Err(Error::config(format!(
            "budget exhausted before the first task: {} labels left, one task costs {cost}",
            ledger.remaining()
        )));
    }
    Ok(out)
}

/// Meta-batch indices into a stored task set, uniform with replacement.
pub fn resample_indices(stored: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, "meta-batch", step as u64);
    (0..batch).map(|_| r.gen_range(0..stored)).collect()
}

fn fresh_episodes(
    source: &TaskSource,
    cfg: &MetaConfig,
    seed: u64,
    step: usize,
) -> Result<Vec<Episode>> {
    let ids: Vec<u64> = match source.task_count() {
        Some(0) => return Err(Error::config("training split holds no tasks")),
        Some(n) => {
            let mut r = rng::stream(seed, "meta-batch", step as u64);
            (0..cfg.meta_batch).map(|_| r.gen_range(0..n as u64)).collect()
        }
        None => (0..cfg.meta_batch)
            .map(|b| rng::derive_seed(seed, "train-task", (step * cfg.meta_batch + b) as u64))
            .collect(),
    };
    ids.into_par_iter()
        .map(|id| {
            sample_episode(
                source,
                cfg.ways,
                cfg.shots,
                cfg.query_shots,
                cfg.sampling,
                id,
                None,
            )
        })
        .collect()
}

/// Runs the outer loop from the seeded initialization.
pub fn meta_train(
    spec: &NetworkSpec,
    cfg: &MetaConfig,
    source: &TaskSource,
    regime: Regime,
    seed: u64,
) -> Result<TrainOutcome> {
    meta_train_from(spec, cfg, source, regime, ParamVector::init(spec, seed), seed)
}

pub fn meta_train_from(
    spec: &NetworkSpec,
    cfg: &MetaConfig,
    source: &TaskSource,
    regime: Regime,
    init: ParamVector,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate(spec)?;
    spec.check_params(&init)?;
    let (stored, ledger) = match regime {
        Regime::Classical => (None, None),
        Regime::Limited {
            mut ledger,
            task_limit,
        } => {
            let tasks = acquire_tasks(source, cfg, &mut ledger, task_limit, seed)?;
            (Some(tasks), Some(ledger))
        }
    };
    let mut state = MetaState::new(init, seed);
    let mut curve = Vec::new();
    let mut tasks_used = BTreeSet::new();
    let mut labels_seen = 0usize;
    for step in 0..cfg.outer_steps {
        let episodes: Vec<Episode> = match &stored {
            Some(d) => resample_indices(d.len(), cfg.meta_batch, seed, step)
                .into_iter()
                .map(|i| d[i].clone())
                .collect(),
            None => {
                let fresh = fresh_episodes(source, cfg, seed, step)?;
                labels_seen += fresh.iter().map(|e| e.support.len() + e.query.len()).sum::<usize>();
                fresh
            }
        };
        tasks_used.extend(episodes.iter().map(|e| e.task_id));
        let (next, objective) =
            meta_step(spec, cfg, &state, &episodes).map_err(|e| e.at_step(step + 1))?;
        state = next;
        if cfg.curve_every > 0 && (step + 1) % cfg.curve_every == 0 {
            curve.push(CurvePoint {
                step: step + 1,
                objective,
            });
        }
    }
    let labels_spent = ledger.as_ref().map_or(labels_seen, BudgetLedger::spent);
    Ok(TrainOutcome {
        params: state.params,
        curve,
        tasks_used,
        labels_spent,
        ledger,
        outer_steps: cfg.outer_steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub mean_accuracy: f64,
    pub per_task: Vec<f64>,
    pub mean_loss: f64,
}

/// Accuracy of the adapted model on one episode's query set.
pub fn episode_accuracy(
    spec: &NetworkSpec,
    theta: &ParamVector,
    cfg: &MetaConfig,
    episode: &Episode,
) -> Result<(f64, f64)> {
    let ev = if cfg.method.is_metric() {
        let s = embed(spec, theta, &episode.support.features)?;
        let protos = compute_prototypes(&s, episode.support.require_labels()?)?;
        evaluate(
            |x| {
                let q = embed(spec, theta, x)?;
                let mut out = Vec::with_capacity(q.rows() * episode.ways);
                for row in q.row_iter() {
                    out.extend(proto_predict(row, &protos, episode.ways, cfg.distance)?);
                }
                Matrix::from_vec(q.rows(), episode.ways, out)
            },
            &episode.query,
        )?
    } else {
        let steps = match cfg.method {
            Method::Fedavg => 0,
            _ => cfg.eval_inner_steps,
        };
        let adapted = gd_adapt(spec, theta, &episode.support, &cfg.inner.with_steps(steps))?;
        evaluate(|x| predict_probs(spec, &adapted, x), &episode.query)?
    };
    Ok((ev.accuracy, ev.mean_loss))
}

/// Evaluation episodes of a run: distinct task ids on the given split.
pub fn eval_episodes(
    source: &TaskSource,
    cfg: &MetaConfig,
    n_tasks: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let ids: Vec<u64> = match source.task_count() {
        Some(n) => (0..n_tasks.min(n) as u64).collect(),
        None => (0..n_tasks as u64)
            .map(|i| rng::derive_seed(seed, "eval-task", i))
            .collect(),
    };
    ids.into_par_iter()
        .map(|id| {
            sample_episode(
                source,
                cfg.ways,
                cfg.shots,
                cfg.eval_query_shots,
                SamplingStrategy::Stratified,
                id,
                None,
            )
        })
        .collect()
}

/// Transfer-risk estimate: adapt on each evaluation support set and score
/// the query set. FedAvg skips adaptation.
pub fn meta_eval(
    spec: &NetworkSpec,
    theta: &ParamVector,
    source: &TaskSource,
    cfg: &MetaConfig,
    n_tasks: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    if n_tasks == 0 {
        return Err(Error::config("evaluation needs at least one task"));
    }
    let episodes = eval_episodes(source, cfg, n_tasks, seed)?;
    let scores: Vec<(f64, f64)> = episodes
        .par_iter()
        .map(|e| episode_accuracy(spec, theta, cfg, e))
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    Ok(EvalOutcome {
        mean_accuracy: scores.iter().map(|s| s.0).sum::<f64>() / n,
        mean_loss: scores.iter().map(|s| s.1).sum::<f64>() / n,
        per_task: scores.into_iter().map(|s| s.0).collect(),
    })
}

/// Exact `∇_θ0 R̂(A_θ0(S), S)`: the support loss after adaptation,
/// differentiated through the inner loop.
pub fn empirical_meta_grad(
    spec: &NetworkSpec,
    theta0: &ParamVector,
    support: &crate::tensor::Batch,
    inner: &AdaptationConfig,
) -> Result<ParamVector> {
    Ok(unrolled_grad(spec, theta0, support, support, inner, Order::Second)?.1)
}

/// Cosine between the Reptile direction `θ0 − A_θ0(S)` and the exact
/// gradient of the empirical estimator.
pub fn reptile_alignment_diagnostic(
    spec: &NetworkSpec,
    theta0: &ParamVector,
    support: &crate::tensor::Batch,
    inner: &AdaptationConfig,
) -> Result<f64> {
    if inner.steps == 0 {
        return Err(Error::config("the diagnostic needs at least one inner step"));
    }
    let adapted = gd_adapt(spec, theta0, support, inner)?;
    let dir: Vec<f64> = theta0
        .values()
        .iter()
        .zip(adapted.values())
        .map(|(a, b)| a - b)
        .collect();
    let g = empirical_meta_grad(spec, theta0, support, inner)?;
    let (nd, ng) = (crate::tensor::norm(&dir), g.norm());
    if nd == 0.0 || ng == 0.0 {
        return Err(Error::UndefinedCosine(format!(
            "direction norms {nd:e} and {ng:e}"
        )));
    }
    Ok((dot(&dir, g.values()) / (nd * ng)).clamp(-1.0, 1.0))
}
