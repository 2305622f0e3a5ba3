//! Feed-forward networks over flat parameter vectors.

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::real::Real;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<R: Real>(self, z: R) -> R {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z.value() > 0.0 {
                    z
                } else {
                    R::zero()
                }
            }
        }
    }

    /// Derivative at `z`; relu uses 0 at the kink.
    #[inline]
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layer {
    Dense {
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        #[serde(default = "yes")]
        bias: bool,
    },
    /// 2-D convolution over a channel-major `channels x height x width`
    /// input row, with symmetric zero padding. A 1-D convolution is the
    /// `in_height = 1`, `kernel.0 = 1` special case.
    Conv {
        in_channels: usize,
        in_height: usize,
        in_width: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        #[serde(default)]
        padding: (usize, usize),
        activation: Activation,
    },
}

fn yes() -> bool {
    true
}

impl Layer {
    pub fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Layer::Dense {
            in_dim,
            out_dim,
            activation,
            bias: true,
        }
    }

    pub fn in_dim(&self) -> usize {
        match *self {
            Layer::Dense { in_dim, .. } => in_dim,
            Layer::Conv {
                in_channels,
                in_height,
                in_width,
                ..
            } => in_channels * in_height * in_width,
        }
    }

    fn conv_out_hw(&self) -> (usize, usize) {
        match *self {
            Layer::Conv {
                in_height,
                in_width,
                kernel,
                stride,
                padding,
                ..
            } => (
                (in_height + 2 * padding.0 - kernel.0) / stride.0 + 1,
                (in_width + 2 * padding.1 - kernel.1) / stride.1 + 1,
            ),
            Layer::Dense { .. } => (1, 1),
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            Layer::Dense { out_dim, .. } => out_dim,
            Layer::Conv { filters, .. } => {
                let (oh, ow) = self.conv_out_hw();
                filters * oh * ow
            }
        }
    }

    pub fn activation(&self) -> Activation {
        match *self {
            Layer::Dense { activation, .. } | Layer::Conv { activation, .. } => activation,
        }
    }

    /// Shapes of the layer's parameter blocks: weights, then bias if any.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Layer::Dense {
                in_dim,
                out_dim,
                bias,
                ..
            } => {
                let mut v = vec![vec![out_dim, in_dim]];
                if bias {
                    v.push(vec![out_dim]);
                }
                v
            }
            Layer::Conv {
                in_channels,
                filters,
                kernel,
                ..
            } => vec![vec![filters, in_channels, kernel.0, kernel.1], vec![filters]],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            Layer::Dense { in_dim, out_dim, .. } => (in_dim, out_dim),
            Layer::Conv {
                in_channels,
                filters,
                kernel,
                ..
            } => (
                in_channels * kernel.0 * kernel.1,
                filters * kernel.0 * kernel.1,
            ),
        }
    }

    fn validate(&self, idx: usize) -> Result<()> {
        match *self {
            Layer::Dense { in_dim, out_dim, .. } => {
                if in_dim == 0 || out_dim == 0 {
                    return Err(Error::layer(idx, "dense dimensions must be positive"));
                }
            }
            Layer::Conv {
                in_channels,
                in_height,
                in_width,
                filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                if in_channels == 0 || filters == 0 || kernel.0 == 0 || kernel.1 == 0 {
                    return Err(Error::layer(idx, "conv sizes must be positive"));
                }
                if stride.0 == 0 || stride.1 == 0 {
                    return Err(Error::layer(idx, "conv stride must be positive"));
                }
                if kernel.0 > in_height + 2 * padding.0 || kernel.1 > in_width + 2 * padding.1 {
                    return Err(Error::layer(idx, "conv kernel larger than input"));
                }
            }
        }
        Ok(())
    }
}

/// How the network's final output is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// Last layer produces class logits; the layer before it is the embedding.
    LinearLogits,
    /// The output itself is the embedding (prototype classifiers).
    EmbeddingOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layers: Vec<Layer>,
    head: Head,
}

impl NetworkSpec {
    pub fn new(layers: Vec<Layer>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            l.validate(i)?;
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::layer(
                    i,
                    format!(
                        "input width {} does not match previous output {}",
                        l.in_dim(),
                        layers[i - 1].out_dim()
                    ),
                ));
            }
        }
        Ok(Self { layers, head })
    }

    /// Dense relu stack. The last layer is linear.
    pub fn mlp(in_dim: usize, hidden: &[usize], out_dim: usize, head: Head) -> Result<Self> {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::dense(dims[i], dims[i + 1], act)
            })
            .collect();
        Self::new(layers, head)
    }

    /// Four stride-2, padding-1, 3x3 relu conv layers. With
    /// `classes = Some(n)` a linear logits layer is appended, otherwise the
    /// last conv output is the embedding.
    pub fn conv4(
        channels: usize,
        height: usize,
        width: usize,
        filters: usize,
        classes: Option<usize>,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let (mut c, mut h, mut w) = (channels, height, width);
        for _ in 0..4 {
            let l = Layer::Conv {
                in_channels: c,
                in_height: h,
                in_width: w,
                filters,
                kernel: (3, 3),
                stride: (2, 2),
                padding: (1, 1),
                activation: Activation::Relu,
            };
            let (oh, ow) = l.conv_out_hw();
            layers.push(l);
            c = filters;
            h = oh;
            w = ow;
        }
        match classes {
            Some(n) => {
                layers.push(Layer::dense(c * h * w, n, Activation::Identity));
                Self::new(layers, Head::LinearLogits)
            }
            None => Self::new(layers, Head::EmbeddingOnly),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.param_shapes()
                    .into_iter()
                    .map(move |shape| LayoutEntry { layer: i, shape })
            })
            .collect()
    }

    /// Number of layers whose output is the representation used for
    /// clustering: the penultimate activation for a logits head, the final
    /// output for an embedding head. Zero means the raw input.
    pub fn embedding_depth(&self) -> usize {
        match self.head {
            Head::LinearLogits => self.layers.len() - 1,
            Head::EmbeddingOnly => self.layers.len(),
        }
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.layers.len() + 1);
        let mut acc = 0;
        off.push(0);
        for l in &self.layers {
            acc += l.param_count();
            off.push(acc);
        }
        off
    }

    /// Rejects a parameter vector whose length does not match the layers.
    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            // find the first layer whose block would overrun
            let off = self.offsets();
            let layer = off
                .iter()
                .skip(1)
                .position(|&o| o > params.len())
                .unwrap_or(self.layers.len().saturating_sub(1));
            return Err(Error::layer(
                layer,
                format!(
                    "parameter vector has {} values, network needs {}",
                    params.len(),
                    self.param_count()
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.in_dim() {
            return Err(Error::layer(
                0,
                format!("input width {cols}, layer expects {}", self.in_dim()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub layer: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat model parameters together with their layer layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<LayoutEntry>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<LayoutEntry>) -> Result<Self> {
        let expected: usize = layout.iter().map(LayoutEntry::size).sum();
        if values.len() != expected {
            return Err(Error::config(format!(
                "{} values for a layout of {expected}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: 0,
                detail: format!("non-finite parameter at coordinate {i}"),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn for_spec(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        Self::new(values, spec.layout())
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            layout: spec.layout(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut r = rng::stream(seed, "param-init", 0);
        let mut values = Vec::with_capacity(spec.param_count());
        for l in spec.layers() {
            let (fan_in, fan_out) = l.fans();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            let shapes = l.param_shapes();
            let w: usize = shapes[0].iter().product();
            values.extend((0..w).map(|_| dist.sample(&mut r)));
            for s in &shapes[1..] {
                values.extend(std::iter::repeat_n(0.0, s.iter().product()));
            }
        }
        Self {
            values,
            layout: spec.layout(),
        }
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.layout.clone())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub(crate) fn same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::config("parameter layouts differ"));
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        super::matrix::norm(&self.values)
    }
}

/// Activations recorded by a forward pass. `acts[0]` is the input,
/// `acts[i + 1]` the output of layer `i`; `pre[i]` holds layer `i`'s
/// pre-activation.
pub(crate) struct Trace<R> {
    pub acts: Vec<Vec<R>>,
    pub pre: Vec<Vec<R>>,
    pub rows: usize,
}

impl<R: Real> Trace<R> {
    pub fn output(&self) -> &[R] {
        self.acts.last().expect("trace has input")
    }
}

pub(crate) fn forward_trace<R: Real>(
    spec: &NetworkSpec,
    params: &[R],
    input: Vec<R>,
    rows: usize,
) -> Trace<R> {
    let off = spec.offsets();
    let mut acts = vec![input];
    let mut pre = Vec::with_capacity(spec.layers.len());
    for (li, layer) in spec.layers.iter().enumerate() {
        let p = &params[off[li]..off[li + 1]];
        let x = &acts[li];
        let z = match *layer {
            Layer::Dense {
                in_dim,
                out_dim,
                bias,
                ..
            } => dense_forward(p, x, rows, in_dim, out_dim, bias),
            Layer::Conv { .. } => conv_forward(layer, p, x, rows),
        };
        let act = layer.activation();
        let a = z.iter().map(|&v| act.apply(v)).collect();
        pre.push(z);
        acts.push(a);
    }
    Trace { acts, pre, rows }
}

fn dense_forward<R: Real>(
    p: &[R],
    x: &[R],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
) -> Vec<R> {
    let (w, b) = p.split_at(in_dim * out_dim);
    let mut z = Vec::with_capacity(rows * out_dim);
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let wo = &w[o * in_dim..(o + 1) * in_dim];
            let mut s = if bias { b[o] } else { R::zero() };
            for i in 0..in_dim {
                s += wo[i] * xr[i];
            }
            z.push(s);
        }
    }
    z
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn of(layer: &Layer) -> Self {
        match *layer {
            Layer::Conv {
                in_channels,
                in_height,
                in_width,
                filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (oh, ow) = layer.conv_out_hw();
                ConvGeom {
                    c: in_channels,
                    h: in_height,
                    w: in_width,
                    f: filters,
                    kh: kernel.0,
                    kw: kernel.1,
                    sh: stride.0,
                    sw: stride.1,
                    ph: padding.0,
                    pw: padding.1,
                    oh,
                    ow,
                }
            }
            Layer::Dense { .. } => unreachable!("conv geometry of a dense layer"),
        }
    }

    #[inline]
    fn w_idx(&self, f: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((f * self.c + c) * self.kh + ky) * self.kw + kx
    }

    /// Input index under output position (oy, ox) and kernel tap (ky, kx),
    /// or `None` inside the zero padding.
    #[inline]
    fn x_idx(&self, c: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.sh + ky).checked_sub(self.ph)?;
        let x = (ox * self.sw + kx).checked_sub(self.pw)?;
        (y < self.h && x < self.w).then(|| (c * self.h + y) * self.w + x)
    }
}

fn conv_forward<R: Real>(layer: &Layer, p: &[R], x: &[R], rows: usize) -> Vec<R> {
    let g = ConvGeom::of(layer);
    let (w, b) = p.split_at(g.f * g.c * g.kh * g.kw);
    let in_dim = g.c * g.h * g.w;
    let out_dim = g.f * g.oh * g.ow;
    let mut z = Vec::with_capacity(rows * out_dim);
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for f in 0..g.f {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut s = b[f];
                    for c in 0..g.c {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                if let Some(xi) = g.x_idx(c, oy, ox, ky, kx) {
                                    s += w[g.w_idx(f, c, ky, kx)] * xr[xi];
                                }
                            }
                        }
                    }
                    z.push(s);
                }
            }
        }
    }
    z
}

/// Vector-Jacobian product of the network output with respect to the
/// parameters, given `out_grad` = dLoss/dOutput (rows x out_dim).
pub(crate) fn backward<R: Real>(
    spec: &NetworkSpec,
    params: &[R],
    trace: &Trace<R>,
    out_grad: Vec<R>,
) -> Vec<R> {
    let off = spec.offsets();
    let rows = trace.rows;
    let mut grad = vec![R::zero(); params.len()];
    let mut upstream = out_grad;
    for li in (0..spec.layers.len()).rev() {
        let layer = &spec.layers[li];
        let act = layer.activation();
        // dZ = dA * act'(Z)
        let dz: Vec<R> = upstream
            .iter()
            .zip(&trace.pre[li])
            .map(|(&g, z)| g.scale(act.slope(z.value())))
            .collect();
        let p = &params[off[li]..off[li + 1]];
        let gp = &mut grad[off[li]..off[li + 1]];
        let x = &trace.acts[li];
        let need_input = li > 0;
        upstream = match *layer {
            Layer::Dense {
                in_dim,
                out_dim,
                bias,
                ..
            } => dense_backward(p, gp, x, &dz, rows, in_dim, out_dim, bias, need_input),
            Layer::Conv { .. } => conv_backward(layer, p, gp, x, &dz, rows, need_input),
        };
    }
    grad
}

#[allow(clippy::too_many_arguments)]
fn dense_backward<R: Real>(
    p: &[R],
    gp: &mut [R],
    x: &[R],
    dz: &[R],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
    need_input: bool,
) -> Vec<R> {
    let nw = in_dim * out_dim;
    let mut dx = if need_input {
        vec![R::zero(); rows * in_dim]
    } else {
        Vec::new()
    };
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let d = dz[r * out_dim + o];
            let gw = &mut gp[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                gw[i] += d * xr[i];
            }
            if bias {
                gp[nw + o] += d;
            }
            if need_input {
                let wo = &p[o * in_dim..(o + 1) * in_dim];
                let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
                for i in 0..in_dim {
                    dxr[i] += d * wo[i];
                }
            }
        }
    }
    dx
}

fn conv_backward<R: Real>(
    layer: &Layer,
    p: &[R],
    gp: &mut [R],
    x: &[R],
    dz: &[R],
    rows: usize,
    need_input: bool,
) -> Vec<R> {
    let g = ConvGeom::of(layer);
    let nw = g.f * g.c * g.kh * g.kw;
    let in_dim = g.c * g.h * g.w;
    let out_dim = g.f * g.oh * g.ow;
    let mut dx = if need_input {
        vec![R::zero(); rows * in_dim]
    } else {
        Vec::new()
    };
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for f in 0..g.f {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let d = dz[r * out_dim + (f * g.oh + oy) * g.ow + ox];
                    gp[nw + f] += d;
                    for c in 0..g.c {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let wi = g.w_idx(f, c, ky, kx);
                                let Some(xi) = g.x_idx(c, oy, ox, ky, kx) else {
                                    continue;
                                };
                                gp[wi] += d * xr[xi];
                                if need_input {
                                    dx[r * in_dim + xi] += d * p[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Runs the network on `features` and returns the output matrix.
pub fn forward_features(
    spec: &NetworkSpec,
    params: &ParamVector,
    features: &Matrix,
) -> Result<Matrix> {
    spec.check_params(params)?;
    spec.check_input(features.cols())?;
    let trace = forward_trace(
        spec,
        params.values(),
        features.as_slice().to_vec(),
        features.rows(),
    );
    Matrix::from_vec(features.rows(), spec.out_dim(), trace.output().to_vec())
}

/// Representation used for clustering and prototype distances.
pub fn embed(spec: &NetworkSpec, params: &ParamVector, features: &Matrix) -> Result<Matrix> {
    spec.check_params(params)?;
    spec.check_input(features.cols())?;
    let depth = spec.embedding_depth();
    let trace = forward_trace(
        spec,
        params.values(),
        features.as_slice().to_vec(),
        features.rows(),
    );
    let width = if depth == 0 {
        spec.in_dim()
    } else {
        spec.layers[depth - 1].out_dim()
    };
    Matrix::from_vec(features.rows(), width, trace.acts[depth].clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatched_layers_name_the_layer() {
        let err = NetworkSpec::new(
            vec![
                Layer::dense(3, 4, Activation::Relu),
                Layer::dense(5, 2, Activation::Identity),
            ],
            Head::LinearLogits,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { layer: Some(1), .. }), "{err}");
    }

    #[test]
    fn layout_matches_param_count() {
        let spec = NetworkSpec::mlp(16, &[32, 32], 5, Head::LinearLogits).unwrap();
        let p = ParamVector::init(&spec, 7);
        let total: usize = p.layout().iter().map(LayoutEntry::size).sum();
        assert_eq!(total, spec.param_count());
        assert_eq!(p.len(), 16 * 32 + 32 + 32 * 32 + 32 + 32 * 5 + 5);
    }

    #[test]
    fn init_is_bounded_with_zero_bias() {
        let spec = NetworkSpec::mlp(4, &[6], 3, Head::LinearLogits).unwrap();
        let p = ParamVector::init(&spec, 1);
        let limit = (6.0f64 / 10.0).sqrt();
        assert!(p.values()[..24].iter().all(|w| w.abs() <= limit));
        assert!(p.values()[24..30].iter().all(|&b| b == 0.0));
        assert_eq!(p, ParamVector::init(&spec, 1));
        assert_ne!(p, ParamVector::init(&spec, 2));
    }

    #[test]
    fn conv_shapes_compose() {
        let spec = NetworkSpec::conv4(1, 28, 28, 64, Some(5)).unwrap();
        assert_eq!(spec.layers().len(), 5);
        // 28 -> 14 -> 7 -> 4 -> 2
        assert_eq!(spec.layers()[4].in_dim(), 64 * 2 * 2);
    }

    #[test]
    fn conv_forward_matches_hand_sum() {
        // one 2x2 filter with stride 1 over a 1x3x3 input of ones
        let layer = Layer::Conv {
            in_channels: 1,
            in_height: 3,
            in_width: 3,
            filters: 1,
            kernel: (2, 2),
            stride: (1, 1),
            padding: (0, 0),
            activation: Activation::Identity,
        };
        let spec = NetworkSpec::new(vec![layer], Head::EmbeddingOnly).unwrap();
        let p = ParamVector::for_spec(&spec, vec![1.0, 2.0, 3.0, 4.0, 0.5]).unwrap();
        let x = Matrix::from_vec(1, 9, (1..=9).map(f64::from).collect()).unwrap();
        let y = forward_features(&spec, &p, &x).unwrap();
        // top-left window (1,2,4,5): 1 + 4 + 12 + 20 + 0.5
        assert_eq!(y.row(0), &[37.5, 47.5, 67.5, 77.5]);
    }
}
