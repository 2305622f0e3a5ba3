//! Inner-loop learners: gradient-descent adaptation and prototype
//! classifiers, plus query-set evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    forward_features, loss_and_grad, sgd_step, squared_distance, Batch, LossSpec, Matrix,
    NetworkSpec, ParamVector,
};

/// Log-probability floor applied when scoring a class the model gives no
/// mass to.
pub const LOG_PROB_FLOOR: f64 = -30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    Constant { lr: f64 },
    /// `α_t = min(lr, c / t)` for `t = 1, 2, ...`.
    Decaying { lr: f64, c: f64 },
}

impl StepSchedule {
    /// Step size of the `t`-th update, `t` starting at 1.
    pub fn rate(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant { lr } => lr,
            StepSchedule::Decaying { lr, c } => lr.min(c / t.max(1) as f64),
        }
    }

    pub fn base(&self) -> f64 {
        match *self {
            StepSchedule::Constant { lr } | StepSchedule::Decaying { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub steps: usize,
    pub schedule: StepSchedule,
    pub loss: LossSpec,
}

impl AdaptationConfig {
    pub fn constant(steps: usize, lr: f64, loss: LossSpec) -> Self {
        Self {
            steps,
            schedule: StepSchedule::Constant { lr },
            loss,
        }
    }

    pub fn with_steps(self, steps: usize) -> Self {
        Self { steps, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && !(self.schedule.base() > 0.0) {
            return Err(Error::config("inner step size must be positive"));
        }
        if let StepSchedule::Decaying { c, .. } = self.schedule {
            if !(c > 0.0) {
                return Err(Error::config("decay constant c must be positive"));
            }
        }
        if !(self.loss.bound > 0.0) {
            return Err(Error::config("loss bound must be positive"));
        }
        Ok(())
    }
}

/// All iterates `θ_0, ..., θ_T` of full-batch gradient descent on the
/// support loss.
pub fn gd_trajectory(
    spec: &NetworkSpec,
    theta0: &ParamVector,
    support: &Batch,
    cfg: &AdaptationConfig,
) -> Result<Vec<ParamVector>> {
    cfg.validate()?;
    let mut path = Vec::with_capacity(cfg.steps + 1);
    path.push(theta0.clone());
    if support.is_empty() {
        // zero gradient: every iterate equals θ_0
        path.resize(cfg.steps + 1, theta0.clone());
        return Ok(path);
    }
    for t in 1..=cfg.steps {
        let cur = &path[t - 1];
        let (_, g) = loss_and_grad(spec, cur, support, &cfg.loss).map_err(|e| e.at_step(t))?;
        let next = sgd_step(cur, &g, cfg.schedule.rate(t)).map_err(|e| e.at_step(t))?;
        path.push(next);
    }
    Ok(path)
}

/// `A_θ0(S)`: `T` full-batch gradient steps from `θ0` on the support set.
pub fn gd_adapt(
    spec: &NetworkSpec,
    theta0: &ParamVector,
    support: &Batch,
    cfg: &AdaptationConfig,
) -> Result<ParamVector> {
    cfg.validate()?;
    let mut theta = theta0.clone();
    if support.is_empty() {
        return Ok(theta);
    }
    for t in 1..=cfg.steps {
        let (_, g) = loss_and_grad(spec, &theta, support, &cfg.loss).map_err(|e| e.at_step(t))?;
        theta = sgd_step(&theta, &g, cfg.schedule.rate(t)).map_err(|e| e.at_step(t))?;
    }
    Ok(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let d2 = squared_distance(a, b);
        match self {
            Distance::SquaredEuclidean => d2,
            Distance::Euclidean => d2.sqrt(),
        }
    }
}

/// Class prototypes: mean support embedding per present class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    prototypes: BTreeMap<usize, Vec<f64>>,
    dim: usize,
}

impl PrototypeSet {
    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.prototypes.get(&class).map(Vec::as_slice)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.prototypes.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.prototypes.iter().map(|(&c, v)| (c, v.as_slice()))
    }
}

pub fn compute_prototypes(embeddings: &Matrix, labels: &[usize]) -> Result<PrototypeSet> {
    if embeddings.rows() != labels.len() {
        return Err(Error::config("embedding rows and labels differ in length"));
    }
    let dim = embeddings.cols();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &y) in embeddings.row_iter().zip(labels) {
        let entry = sums.entry(y).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in entry.0.iter_mut().zip(row) {
            *s += v;
        }
        entry.1 += 1;
    }
    let prototypes = sums
        .into_iter()
        .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    Ok(PrototypeSet { prototypes, dim })
}

/// Softmax of negated distances, shifted by the minimum distance.
pub fn distance_softmax(distances: &[f64]) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = distances.iter().map(|d| (min - d).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Class probabilities over `ways` classes. Classes without a prototype get
/// zero mass; with no prototypes at all the result is uniform.
pub fn proto_predict(
    embedding: &[f64],
    protos: &PrototypeSet,
    ways: usize,
    distance: Distance,
) -> Result<Vec<f64>> {
    if protos.is_empty() {
        if ways == 0 {
            return Err(Error::config("no classes to predict"));
        }
        return Ok(vec![1.0 / ways as f64; ways]);
    }
    if embedding.len() != protos.dim {
        return Err(Error::config(format!(
            "embedding has {} dims, prototypes {}",
            embedding.len(),
            protos.dim
        )));
    }
    let classes: Vec<usize> = protos.present_classes().collect();
    if let Some(&c) = classes.iter().find(|&&c| c >= ways) {
        return Err(Error::config(format!("prototype class {c} outside {ways} ways")));
    }
    let d: Vec<f64> = protos
        .iter()
        .map(|(_, c)| distance.eval(embedding, c))
        .collect();
    let p = distance_softmax(&d);
    let mut out = vec![0.0; ways];
    for (c, pc) in classes.into_iter().zip(p) {
        out[c] = pc;
    }
    Ok(out)
}

/// Row-wise softmax of a logits matrix.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Vec::with_capacity(logits.rows() * logits.cols());
    for row in logits.row_iter() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    Matrix::from_vec(logits.rows(), logits.cols(), out).expect("same shape")
}

/// Predictive distribution of a logits network.
pub fn predict_probs(spec: &NetworkSpec, params: &ParamVector, features: &Matrix) -> Result<Matrix> {
    Ok(softmax_rows(&forward_features(spec, params, features)?))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean negative log-probability of the true class, floored.
    pub mean_loss: f64,
}

/// Accuracy and mean log-loss of a probabilistic predictor on a labeled
/// query set.
pub fn evaluate<F>(predict: F, query: &Batch) -> Result<Evaluation>
where
    F: FnOnce(&Matrix) -> Result<Matrix>,
{
    let labels = query.require_labels()?;
    if labels.is_empty() {
        return Err(Error::config("cannot evaluate on an empty query set"));
    }
    let probs = predict(&query.features)?;
    if probs.rows() != labels.len() {
        return Err(Error::config("predictor returned the wrong number of rows"));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (row, &y) in probs.row_iter().zip(labels) {
        if argmax(row) == y {
            correct += 1;
        }
        let p = row.get(y).copied().unwrap_or(0.0);
        loss -= p.ln().max(LOG_PROB_FLOOR);
    }
    let n = labels.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}
