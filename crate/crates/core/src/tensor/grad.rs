//! Losses, exact reverse-mode gradients, Hessian-vector products and the
//! finite-difference oracle.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::network::{backward, forward_trace, NetworkSpec, ParamVector};
use super::real::{Dual, Real};
use crate::error::{Error, Result};

/// Features with optional class labels in `[0, N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::config(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn labeled(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        Self::new(features, Some(labels))
    }

    pub fn empty(cols: usize) -> Self {
        Self {
            features: Matrix::zeros(0, cols),
            labels: Some(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub(crate) fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::config("batch has no labels"))
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            features: self.features.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Concatenates two labeled batches.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        let features = self.features.vstack(&other.features)?;
        let mut labels = self.require_labels()?.to_vec();
        labels.extend_from_slice(other.require_labels()?);
        Batch::labeled(features, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// Half squared error against one-hot targets. A single-output network
    /// regresses the label value itself.
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Upper bound on the per-example loss; consumed by the bound evaluators.
    pub bound: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, bound: f64) -> Result<Self> {
        if !(bound > 0.0) {
            return Err(Error::config("loss bound M must be positive"));
        }
        Ok(Self { kind, bound })
    }

    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::SoftmaxCrossEntropy,
            bound: 1.0,
        }
    }

    pub fn squared() -> Self {
        Self {
            kind: LossKind::SquaredError,
            bound: 1.0,
        }
    }
}

/// Mean loss of `outputs` and its gradient with respect to them.
pub(crate) fn output_loss<R: Real>(
    kind: LossKind,
    outputs: &[R],
    out_dim: usize,
    labels: &[usize],
) -> (R, Vec<R>) {
    let rows = labels.len();
    let mut total = R::zero();
    let mut grad = vec![R::zero(); outputs.len()];
    if rows == 0 {
        return (total, grad);
    }
    let inv = 1.0 / rows as f64;
    for (r, &y) in labels.iter().enumerate() {
        let z = &outputs[r * out_dim..(r + 1) * out_dim];
        let g = &mut grad[r * out_dim..(r + 1) * out_dim];
        match kind {
            LossKind::SoftmaxCrossEntropy => {
                let m = z
                    .iter()
                    .map(|v| v.value())
                    .fold(f64::NEG_INFINITY, f64::max);
                let shifted: Vec<R> = z.iter().map(|&v| (v - R::from_f64(m)).exp()).collect();
                let mut denom = R::zero();
                for &e in &shifted {
                    denom += e;
                }
                let lse = denom.ln() + R::from_f64(m);
                total += lse - z[y];
                for k in 0..out_dim {
                    let p = shifted[k] / denom;
                    let t = if k == y { 1.0 } else { 0.0 };
                    g[k] = (p - R::from_f64(t)).scale(inv);
                }
            }
            LossKind::SquaredError => {
                for k in 0..out_dim {
                    let t = if out_dim == 1 {
                        y as f64
                    } else if k == y {
                        1.0
                    } else {
                        0.0
                    };
                    let d = z[k] - R::from_f64(t);
                    total += (d * d).scale(0.5);
                    g[k] = d.scale(inv);
                }
            }
        }
    }
    (total.scale(inv), grad)
}

fn check_batch(spec: &NetworkSpec, params: &ParamVector, batch: &Batch) -> Result<()> {
    spec.check_params(params)?;
    if !batch.is_empty() {
        spec.check_input(batch.features.cols())?;
    }
    let labels = batch.require_labels()?;
    if spec.out_dim() > 1 {
        if let Some(&bad) = labels.iter().find(|&&y| y >= spec.out_dim()) {
            return Err(Error::config(format!(
                "label {bad} out of range for {} outputs",
                spec.out_dim()
            )));
        }
    }
    Ok(())
}

fn loss_grad_generic<R: Real>(
    spec: &NetworkSpec,
    params: &[R],
    batch: &Batch,
    kind: LossKind,
) -> (R, Vec<R>) {
    let labels = batch.labels.as_deref().unwrap_or(&[]);
    if labels.is_empty() {
        return (R::zero(), vec![R::zero(); params.len()]);
    }
    let input = batch
        .features
        .as_slice()
        .iter()
        .map(|&v| R::from_f64(v))
        .collect();
    let trace = forward_trace(spec, params, input, batch.len());
    let (loss, out_grad) = output_loss(kind, trace.output(), spec.out_dim(), labels);
    let grad = backward(spec, params, &trace, out_grad);
    (loss, grad)
}

/// Mean loss over the batch. An empty batch has loss zero.
pub fn loss_value(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &Batch,
    loss: &LossSpec,
) -> Result<f64> {
    check_batch(spec, params, batch)?;
    let labels = batch.require_labels()?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let trace = forward_trace(
        spec,
        params.values(),
        batch.features.as_slice().to_vec(),
        batch.len(),
    );
    Ok(output_loss::<f64>(loss.kind, trace.output(), spec.out_dim(), labels).0)
}

/// Mean loss and its exact gradient. An empty batch gives `(0, 0)`.
pub fn loss_and_grad(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &Batch,
    loss: &LossSpec,
) -> Result<(f64, ParamVector)> {
    check_batch(spec, params, batch)?;
    let (l, g) = loss_grad_generic(spec, params.values(), batch, loss.kind);
    if !l.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            detail: "non-finite loss".into(),
        });
    }
    Ok((l, params.with_values(g).map_err(|e| e.at_step(0))?))
}

/// Exact Hessian-vector product `H(θ)·v` of the mean batch loss, computed
/// by pushing a dual direction through the reverse-mode gradient.
pub fn hvp(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &Batch,
    loss: &LossSpec,
    direction: &ParamVector,
) -> Result<ParamVector> {
    check_batch(spec, params, batch)?;
    params.same_layout(direction)?;
    let duals: Vec<Dual> = params
        .values()
        .iter()
        .zip(direction.values())
        .map(|(&p, &v)| Dual::new(p, v))
        .collect();
    let (_, g) = loss_grad_generic(spec, &duals, batch, loss.kind);
    params.with_values(g.into_iter().map(|d| d.eps).collect())
}

/// Central finite-difference gradient of the mean batch loss.
pub fn finite_diff_grad(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &Batch,
    loss: &LossSpec,
    step: f64,
) -> Result<ParamVector> {
    if !(step > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    central_differences(params, step, |p| loss_value(spec, p, batch, loss))
}

/// Central differences of an arbitrary scalar function of the parameters.
pub fn central_differences<F>(params: &ParamVector, step: f64, mut f: F) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    let mut work = params.values().to_vec();
    let mut out = Vec::with_capacity(work.len());
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + step;
        let up = f(&params.with_values(work.clone())?)?;
        work[i] = orig - step;
        let down = f(&params.with_values(work.clone())?)?;
        work[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    params.with_values(out)
}

/// `params - step * grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, step: f64) -> Result<ParamVector> {
    params.same_layout(grad)?;
    if let Some(i) = grad.values().iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical {
            step: 0,
            detail: format!("non-finite gradient at coordinate {i}"),
        });
    }
    let values = params
        .values()
        .iter()
        .zip(grad.values())
        .map(|(&p, &g)| p - step * g)
        .collect();
    params.with_values(values)
}

/// Gradient discrepancy `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = super::matrix::norm(a).max(super::matrix::norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
