//! Stability-based generalization bounds for meta-learning, evaluated
//! exactly, plus empirical estimates of the Lipschitz and smoothness
//! constants they assume.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{loss_and_grad, Batch, LossSpec, NetworkSpec, ParamVector};

/// Constants of a stochastic gradient method with steps `α_t ≤ c/t` on an
/// `L`-Lipschitz, `γ`-smooth loss, run for `T` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgmConstants {
    pub lipschitz: f64,
    pub smoothness: f64,
    pub step_c: f64,
    pub steps: f64,
}

impl SgmConstants {
    pub fn new(lipschitz: f64, smoothness: f64, step_c: f64, steps: f64) -> Self {
        Self {
            lipschitz,
            smoothness,
            step_c,
            steps,
        }
    }

    fn validate(&self, which: &str) -> Result<()> {
        let ok = self.lipschitz >= 0.0
            && self.lipschitz.is_finite()
            && self.smoothness > 0.0
            && self.smoothness.is_finite()
            && self.step_c > 0.0
            && self.step_c.is_finite()
            && self.steps >= 1.0
            && self.steps.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "{which} constants need L >= 0, γ > 0, c > 0 and T >= 1, got {self:?}"
            )))
        }
    }

    /// `(1 + 1/(γc))·(2cL²)^{1/(γc+1)}·T^{1−1/(γc+1)}`, the stability
    /// coefficient before the `1/(n−1)` factor.
    pub fn coefficient(&self) -> f64 {
        let gc = self.smoothness * self.step_c;
        let e = 1.0 / (gc + 1.0);
        (1.0 + 1.0 / gc)
            * (2.0 * self.step_c * self.lipschitz * self.lipschitz).powf(e)
            * self.steps.powf(1.0 - e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstants {
    pub inner: SgmConstants,
    pub outer: SgmConstants,
    /// Upper bound on the loss.
    pub loss_bound: f64,
    pub delta: f64,
}

impl StabilityConstants {
    pub fn validate(&self) -> Result<()> {
        self.inner.validate("inner")?;
        self.outer.validate("outer")?;
        if !(self.loss_bound > 0.0 && self.loss_bound.is_finite()) {
            return Err(Error::Domain("loss bound M must be positive".into()));
        }
        check_delta(self.delta)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("δ must lie in (0, 1], got {delta}")))
    }
}

fn check_n(n: usize, what: &str) -> Result<()> {
    if n < 2 {
        return Err(Error::Domain(format!("{what} must be at least 2, got {n}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    Maurer,
    Q,
    Theorem2Q,
    Theorem2Emp,
}

impl BoundKind {
    pub fn name(self) -> &'static str {
        match self {
            BoundKind::Maurer => "maurer",
            BoundKind::Q => "q",
            BoundKind::Theorem2Q => "theorem2-q",
            BoundKind::Theorem2Emp => "theorem2-emp",
        }
    }
}

/// A bound value with its additive breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub kind: BoundKind,
    pub value: f64,
    pub stability_term: f64,
    pub concentration_term: f64,
    pub inner_term: f64,
    /// Outer stability coefficient, when derived from constants.
    pub c: Option<f64>,
    pub n: usize,
    pub m: Option<usize>,
    pub delta: f64,
}

impl BoundResult {
    fn new(kind: BoundKind, parts: [f64; 3], n: usize, delta: f64) -> Self {
        let [stability_term, concentration_term, inner_term] = parts;
        Self {
            kind,
            value: stability_term + concentration_term + inner_term,
            stability_term,
            concentration_term,
            inner_term,
            c: None,
            n,
            m: None,
            delta,
        }
    }
}

/// Uniform stability of SGM on `n` samples:
/// `β ≤ ((1 + 1/(γc))/(n−1))·(2cL²)^{1/(γc+1)}·T^{1−1/(γc+1)}`.
pub fn sgm_stability(lipschitz: f64, smoothness: f64, step_c: f64, steps: f64, n: usize) -> Result<f64> {
    check_n(n, "sample size")?;
    let k = SgmConstants::new(lipschitz, smoothness, step_c, steps);
    k.validate("sgm")?;
    Ok(k.coefficient() / (n - 1) as f64)
}

/// `2β′ + (4nβ′ + M)·√(ln(1/δ)/(2n)) + 2β`.
pub fn maurer_bound(beta_outer: f64, beta_inner: f64, n: usize, loss_bound: f64, delta: f64) -> Result<BoundResult> {
    check_delta(delta)?;
    if n == 0 {
        return Err(Error::Domain("need at least one task".into()));
    }
    if !(beta_outer >= 0.0 && beta_inner >= 0.0 && loss_bound >= 0.0) {
        return Err(Error::Domain("stability and loss bounds must be non-negative".into()));
    }
    let nf = n as f64;
    let conc = (4.0 * nf * beta_outer + loss_bound) * ((1.0 / delta).ln() / (2.0 * nf)).sqrt();
    Ok(BoundResult::new(
        BoundKind::Maurer,
        [2.0 * beta_outer, conc, 2.0 * beta_inner],
        n,
        delta,
    ))
}

/// The query-set bound: [`maurer_bound`] without the inner term.
pub fn q_bound(beta_q: f64, n: usize, loss_bound: f64, delta: f64) -> Result<BoundResult> {
    let mut r = maurer_bound(beta_q, 0.0, n, loss_bound, delta)?;
    r.kind = BoundKind::Q;
    Ok(r)
}

/// Exact form `B′ = (2C/n)(1 + 1/(n−1)) + 2C·√(2 ln(1/δ)/n)·(1 + 1/(n−1) + M/(4C))`.
pub fn theorem2_bound_q(consts: &StabilityConstants, n: usize, delta: f64) -> Result<BoundResult> {
    consts.validate()?;
    check_delta(delta)?;
    check_n(n, "task count")?;
    if consts.outer.lipschitz == 0.0 {
        return Err(Error::Domain(
            "outer Lipschitz constant 0 makes C vanish and M/(4C) undefined".into(),
        ));
    }
    let c = consts.outer.coefficient();
    let nf = n as f64;
    let corr = 1.0 + 1.0 / (nf - 1.0);
    let stability = 2.0 * c / nf * corr;
    let conc = 2.0
        * c
        * (2.0 * (1.0 / delta).ln() / nf).sqrt()
        * (corr + consts.loss_bound / (4.0 * c));
    let mut r = BoundResult::new(BoundKind::Theorem2Q, [stability, conc, 0.0], n, delta);
    r.c = Some(c);
    Ok(r)
}

/// `B′(n) + 2·β(m)`: the empirical-estimator bound pays the inner
/// algorithm's stability on `m` support examples.
pub fn theorem2_bound_emp(consts: &StabilityConstants, n: usize, m: usize, delta: f64) -> Result<BoundResult> {
    let q = theorem2_bound_q(consts, n, delta)?;
    let i = consts.inner;
    let beta = sgm_stability(i.lipschitz, i.smoothness, i.step_c, i.steps, m)?;
    let inner = 2.0 * beta;
    Ok(BoundResult {
        kind: BoundKind::Theorem2Emp,
        value: q.value + inner,
        inner_term: inner,
        m: Some(m),
        ..q
    })
}

/// Both meta-level bounds for every `(n, m)` pair, q-bound row first.
pub fn bound_sweep(
    consts: &StabilityConstants,
    n_grid: &[usize],
    m_grid: &[usize],
    delta: f64,
) -> Result<Vec<BoundResult>> {
    if n_grid.is_empty() || m_grid.is_empty() {
        return Err(Error::config("sweep grids must be non-empty"));
    }
    let mut rows = Vec::with_capacity(2 * n_grid.len() * m_grid.len());
    for &n in n_grid {
        for &m in m_grid {
            let mut q = theorem2_bound_q(consts, n, delta)?;
            q.m = Some(m);
            rows.push(q);
            rows.push(theorem2_bound_emp(consts, n, m, delta)?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatedConstants {
    /// Largest gradient norm seen; a lower estimate of `L`.
    pub lipschitz: f64,
    /// Largest gradient difference quotient seen; a lower estimate of `γ`.
    pub smoothness: f64,
    pub probes: usize,
    /// Probe pairs used for the smoothness estimate.
    pub pairs: usize,
}

/// The `i`-th probe point: `center + radius·z` with `z` standard normal.
pub fn probe_point(center: &ParamVector, radius: f64, seed: u64, i: usize) -> Result<ParamVector> {
    let mut r = rng::stream(seed, "probe", i as u64);
    let vals = center
        .values()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut r);
            v + radius * z
        })
        .collect();
    center.with_values(vals)
}

/// Empirical constants from gradients at `probe_count` points around
/// `center`. Identical probe pairs are skipped.
pub fn estimate_constants(
    spec: &NetworkSpec,
    loss: &LossSpec,
    center: &ParamVector,
    data: &Batch,
    probe_count: usize,
    radius: f64,
    seed: u64,
) -> Result<EstimatedConstants> {
    if probe_count < 2 {
        return Err(Error::config("constant estimation needs at least 2 probes"));
    }
    let mut points = Vec::with_capacity(probe_count);
    let mut grads = Vec::with_capacity(probe_count);
    for i in 0..probe_count {
        let p = probe_point(center, radius, seed, i)?;
        grads.push(loss_and_grad(spec, &p, data, loss)?.1);
        points.push(p);
    }
    let lipschitz = grads.iter().map(ParamVector::norm).fold(0.0, f64::max);
    let mut smoothness = 0.0f64;
    let mut pairs = 0;
    for a in 0..probe_count {
        for b in a + 1..probe_count {
            let dx = diff_norm(points[a].values(), points[b].values());
            if dx == 0.0 {
                continue;
            }
            pairs += 1;
            smoothness = smoothness.max(diff_norm(grads[a].values(), grads[b].values()) / dx);
        }
    }
    Ok(EstimatedConstants {
        lipschitz,
        smoothness,
        probes: probe_count,
        pairs,
    })
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
