//! Micro CNN with hand-written forward and backward passes.
//!
//! A batch is a [`Matrix`] with one sample per row, each row laid out
//! channel-major as `(c, h, w)`. Convolutions are valid (no padding), stride 1,
//! without bias. Linear layers compute `y = Wᵀx + b` with `W ∈ R^{d_in×d_out}`,
//! which is the orientation the Gram-based merge expects.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, Manifest, CHECKPOINT_MAGIC};
use crate::math::{Matrix, SeededRng, Tensor4};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        filters: usize,
        channels: usize,
        kernel: usize,
    },
    Relu,
    AvgPool2,
    Flatten,
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

/// Activation shape `(channels, height, width)`; flattened activations are
/// `(features, 1, 1)`.
pub type Shape = [usize; 3];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: Shape,
    pub classes: usize,
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    /// conv(8, 3×3) → relu → pool → conv(16, 3×3) → relu → pool → flatten →
    /// linear(32) → relu → linear(classes).
    pub fn reduced_lenet(input: Shape, classes: usize) -> Result<Self> {
        Self::lenet_with_kernel(input, classes, 3)
    }

    /// Same topology with a different first-layer kernel size.
    pub fn lenet_with_kernel(input: Shape, classes: usize, first_kernel: usize) -> Result<Self> {
        let [c, h, w] = input;
        let after_conv1 = [h.saturating_sub(first_kernel - 1) / 2, w.saturating_sub(first_kernel - 1) / 2];
        let after_conv2 = [after_conv1[0].saturating_sub(2) / 2, after_conv1[1].saturating_sub(2) / 2];
        let flat = 16 * after_conv2[0] * after_conv2[1];
        let spec = ModelSpec {
            input,
            classes,
            layers: vec![
                Layer::Conv {
                    filters: 8,
                    channels: c,
                    kernel: first_kernel,
                },
                Layer::Relu,
                Layer::AvgPool2,
                Layer::Conv {
                    filters: 16,
                    channels: 8,
                    kernel: 3,
                },
                Layer::Relu,
                Layer::AvgPool2,
                Layer::Flatten,
                Layer::Linear {
                    inputs: flat,
                    outputs: 32,
                },
                Layer::Relu,
                Layer::Linear {
                    inputs: 32,
                    outputs: classes,
                },
            ],
        };
        spec.shapes()?;
        Ok(spec)
    }

    /// Activation shapes: `shapes[i]` feeds layer `i`, the last entry is the
    /// logits shape. Fails when consecutive layers do not compose.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.input.iter().any(|&d| d == 0) {
            return bad(format!("empty input shape {:?}", self.input));
        }
        if self.classes == 0 {
            return bad("zero classes".into());
        }
        let mut shapes = vec![self.input];
        let mut cur = self.input;
        let mut flattened = false;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                Layer::Conv {
                    filters,
                    channels,
                    kernel,
                } => {
                    if flattened {
                        return bad(format!("layer {i}: conv after flatten"));
                    }
                    if channels != cur[0] || filters == 0 || kernel == 0 {
                        return bad(format!("layer {i}: conv expects {channels} channels, input has {}", cur[0]));
                    }
                    if cur[1] < kernel || cur[2] < kernel {
                        return bad(format!("layer {i}: kernel {kernel} larger than {}x{}", cur[1], cur[2]));
                    }
                    [filters, cur[1] - kernel + 1, cur[2] - kernel + 1]
                }
                Layer::Relu => cur,
                Layer::AvgPool2 => {
                    if flattened || cur[1] < 2 || cur[2] < 2 {
                        return bad(format!("layer {i}: cannot pool {:?}", cur));
                    }
                    [cur[0], cur[1] / 2, cur[2] / 2]
                }
                Layer::Flatten => {
                    flattened = true;
                    [cur.iter().product(), 1, 1]
                }
                Layer::Linear { inputs, outputs } => {
                    let width = cur.iter().product::<usize>();
                    if !flattened && (cur[1] != 1 || cur[2] != 1) {
                        return bad(format!("layer {i}: linear before flatten"));
                    }
                    if inputs != width || outputs == 0 {
                        return bad(format!("layer {i}: linear expects {inputs} inputs, got {width}"));
                    }
                    flattened = true;
                    [outputs, 1, 1]
                }
            };
            shapes.push(cur);
        }
        if cur != [self.classes, 1, 1] {
            return bad(format!("output shape {:?} does not match {} classes", cur, self.classes));
        }
        if self.conv_layers().is_empty() || self.linear_layers().is_empty() {
            return bad("need at least one conv and one linear layer".into());
        }
        Ok(shapes)
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn linear_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Linear { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Hash of the canonical JSON form.
    pub fn fingerprint(&self) -> u64 {
        hash_json(self)
    }

    /// Fingerprint with conv kernel sizes erased: two models whose only
    /// difference is the spatial size of their filters share it.
    pub fn structure_fingerprint(&self) -> u64 {
        let mut erased = self.clone();
        for layer in &mut erased.layers {
            if let Layer::Conv { kernel, .. } = layer {
                *kernel = 0;
            }
        }
        hash_json(&erased)
    }
}

fn hash_json<T: Serialize>(value: &T) -> u64 {
    let text = serde_json::to_string(value).expect("spec serialises");
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    None,
    Conv(Tensor4),
    Linear { weight: Matrix, bias: Vec<f64> },
}

impl LayerParams {
    fn slices(&self) -> Vec<&[f64]> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv(t) => vec![t.as_slice()],
            LayerParams::Linear { weight, bias } => vec![weight.as_slice(), bias.as_slice()],
        }
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv(t) => vec![t.as_mut_slice()],
            LayerParams::Linear { weight, bias } => vec![weight.as_mut_slice(), bias.as_mut_slice()],
        }
    }
}

/// Parameters of one model replica, tied to its spec by fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    spec: ModelSpec,
    fingerprint: u64,
    layers: Vec<LayerParams>,
}

impl ModelWeights {
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.shapes()?;
        let layers = spec
            .layers
            .iter()
            .map(|l| match *l {
                Layer::Conv {
                    filters,
                    channels,
                    kernel,
                } => LayerParams::Conv(Tensor4::zeros([filters, channels, kernel, kernel])),
                Layer::Linear { inputs, outputs } => LayerParams::Linear {
                    weight: Matrix::zeros(inputs, outputs),
                    bias: vec![0.0; outputs],
                },
                _ => LayerParams::None,
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            fingerprint: spec.fingerprint(),
            layers,
        })
    }

    /// He-normal initialisation; the final linear layer uses `1/d_in`
    /// variance. Biases start at zero.
    pub fn init(spec: &ModelSpec, rng: &mut SeededRng) -> Result<Self> {
        let mut w = Self::zeros(spec)?;
        let last_linear = *spec.linear_layers().last().expect("validated");
        for (i, params) in w.layers.iter_mut().enumerate() {
            match params {
                LayerParams::Conv(t) => {
                    let std = (2.0 / t.kernel_len() as f64).sqrt();
                    t.as_mut_slice().iter_mut().for_each(|v| *v = std * rng.normal());
                }
                LayerParams::Linear { weight, .. } => {
                    let gain = if i == last_linear { 1.0 } else { 2.0 };
                    let std = (gain / weight.rows() as f64).sqrt();
                    weight.as_mut_slice().iter_mut().for_each(|v| *v = std * rng.normal());
                }
                LayerParams::None => {}
            }
        }
        Ok(w)
    }

    /// Assembles weights from per-layer parameters, checking every shape
    /// against the spec.
    pub fn from_layers(spec: &ModelSpec, layers: Vec<LayerParams>) -> Result<Self> {
        spec.shapes()?;
        if layers.len() != spec.layers.len() {
            return Err(Error::Dimension(format!(
                "{} parameter entries for {} layers",
                layers.len(),
                spec.layers.len()
            )));
        }
        for (i, (layer, params)) in spec.layers.iter().zip(&layers).enumerate() {
            let ok = match (layer, params) {
                (
                    Layer::Conv {
                        filters,
                        channels,
                        kernel,
                    },
                    LayerParams::Conv(t),
                ) => t.dims() == [*filters, *channels, *kernel, *kernel],
                (Layer::Linear { inputs, outputs }, LayerParams::Linear { weight, bias }) => {
                    weight.shape() == (*inputs, *outputs) && bias.len() == *outputs
                }
                (Layer::Conv { .. } | Layer::Linear { .. }, _) => false,
                (_, LayerParams::None) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Dimension(format!("layer {i}: parameters do not match {layer:?}")));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            fingerprint: spec.fingerprint(),
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<LayerParams> {
        self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerParams {
        &self.layers[i]
    }

    pub fn conv(&self, i: usize) -> Option<&Tensor4> {
        match &self.layers[i] {
            LayerParams::Conv(t) => Some(t),
            _ => None,
        }
    }

    pub fn linear(&self, i: usize) -> Option<(&Matrix, &[f64])> {
        match &self.layers[i] {
            LayerParams::Linear { weight, bias } => Some((weight, bias)),
            _ => None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter buffers in checkpoint order: per layer, conv kernels or
    /// linear weight then bias.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.slices()).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.slices_mut()).collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn check_compatible(&self, other: &ModelWeights) -> Result<()> {
        if self.fingerprint != other.fingerprint {
            return Err(Error::ArchitectureMismatch {
                expected: self.fingerprint,
                found: other.fingerprint,
            });
        }
        Ok(())
    }

    pub fn squared_distance(&self, other: &ModelWeights) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .param_slices()
            .iter()
            .zip(other.param_slices())
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// `Σ coeffs[i] · models[i]`, accumulated in slice order.
    pub fn linear_combination(models: &[&ModelWeights], coeffs: &[f64]) -> Result<ModelWeights> {
        let first = *models
            .first()
            .ok_or_else(|| Error::InvalidArgument("linear combination of zero models".into()))?;
        if models.len() != coeffs.len() {
            return Err(Error::Dimension(format!(
                "{} models, {} coefficients",
                models.len(),
                coeffs.len()
            )));
        }
        for m in &models[1..] {
            first.check_compatible(m)?;
        }
        let mut out = first.clone();
        for (dst_i, dst) in out.param_slices_mut().into_iter().enumerate() {
            for (k, (m, &c)) in models.iter().zip(coeffs).enumerate() {
                let src = m.param_slices()[dst_i];
                if k == 0 {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d = c * s);
                } else {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += c * s);
                }
            }
        }
        Ok(out)
    }
}

/// Captured input of a linear layer: `x` has one row per sample and one
/// column per input feature (`m × d`), so its Gram is `xᵀx ∈ R^{d×d}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTap {
    pub layer: usize,
    pub x: Matrix,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Matrix,
    pub taps: Vec<ActivationTap>,
}

/// FedProx proximal term `(μ/2)·‖w − anchor‖²`.
#[derive(Clone, Copy, Debug)]
pub struct Prox<'a> {
    pub mu: f64,
    pub anchor: &'a ModelWeights,
}

fn check_batch(spec: &ModelSpec, batch: &Matrix) -> Result<()> {
    if batch.cols() != spec.input_len() {
        return Err(Error::Dimension(format!(
            "batch rows have {} values, spec input {:?} needs {}",
            batch.cols(),
            spec.input,
            spec.input_len()
        )));
    }
    if batch.rows() == 0 {
        return Err(Error::Dimension("empty batch".into()));
    }
    Ok(())
}

fn conv_forward(x: &[f64], shape: Shape, kernels: &Tensor4, out: &mut [f64]) {
    let [c, h, w] = shape;
    let n = kernels.kernel_size();
    let (oh, ow) = (h - n + 1, w - n + 1);
    for o in 0..kernels.filters() {
        let out_plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for ci in 0..c {
            let in_plane = &x[ci * h * w..(ci + 1) * h * w];
            for u in 0..n {
                for v in 0..n {
                    let k = kernels.at(o, ci, u, v);
                    if k == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let src = &in_plane[(y + u) * w + v..(y + u) * w + v + ow];
                        let dst = &mut out_plane[y * ow..(y + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += k * s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates kernel gradients and, when `dx` is given, input gradients.
fn conv_backward(x: &[f64], shape: Shape, kernels: &Tensor4, dy: &[f64], dk: &mut Tensor4, mut dx: Option<&mut [f64]>) {
    let [c, h, w] = shape;
    let n = kernels.kernel_size();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let [_, ch, kn, km] = kernels.dims();
    for o in 0..kernels.filters() {
        let dy_plane = &dy[o * oh * ow..(o + 1) * oh * ow];
        for ci in 0..c {
            let in_plane = &x[ci * h * w..(ci + 1) * h * w];
            for u in 0..n {
                for v in 0..n {
                    let idx = ((o * ch + ci) * kn + u) * km + v;
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let src = &in_plane[(y + u) * w + v..(y + u) * w + v + ow];
                        let g = &dy_plane[y * ow..(y + 1) * ow];
                        acc += src.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dk.as_mut_slice()[idx] += acc;
                    if let Some(dx) = dx.as_deref_mut() {
                        let k = kernels.as_slice()[idx];
                        if k == 0.0 {
                            continue;
                        }
                        let dx_plane = &mut dx[ci * h * w..(ci + 1) * h * w];
                        for y in 0..oh {
                            let g = &dy_plane[y * ow..(y + 1) * ow];
                            let dst = &mut dx_plane[(y + u) * w + v..(y + u) * w + v + ow];
                            for (d, gv) in dst.iter_mut().zip(g) {
                                *d += k * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn pool_forward(x: &[f64], shape: Shape, out: &mut [f64]) {
    let [c, h, w] = shape;
    let (oh, ow) = (h / 2, w / 2);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ci * h * w;
                let s = x[base + 2 * y * w + 2 * xx]
                    + x[base + 2 * y * w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * w + 2 * xx]
                    + x[base + (2 * y + 1) * w + 2 * xx + 1];
                out[ci * oh * ow + y * ow + xx] = 0.25 * s;
            }
        }
    }
}

fn pool_backward(shape: Shape, dy: &[f64], dx: &mut [f64]) {
    let [c, h, w] = shape;
    let (oh, ow) = (h / 2, w / 2);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let g = 0.25 * dy[ci * oh * ow + y * ow + xx];
                let base = ci * h * w;
                dx[base + 2 * y * w + 2 * xx] += g;
                dx[base + 2 * y * w + 2 * xx + 1] += g;
                dx[base + (2 * y + 1) * w + 2 * xx] += g;
                dx[base + (2 * y + 1) * w + 2 * xx + 1] += g;
            }
        }
    }
}

fn linear_forward(x: &Matrix, weight: &Matrix, bias: &[f64]) -> Matrix {
    let mut y = x.matmul(weight).expect("validated shapes");
    for r in 0..y.rows() {
        y.row_mut(r).iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
    y
}

/// Activations entering each layer plus the logits: `acts[i]` feeds layer
/// `i`, `acts[layers.len()]` is the output.
fn forward_trace(weights: &ModelWeights, batch: &Matrix) -> Result<Vec<Matrix>> {
    check_batch(&weights.spec, batch)?;
    let shapes = weights.spec.shapes()?;
    let n = batch.rows();
    let mut acts = Vec::with_capacity(shapes.len());
    acts.push(batch.clone());
    for (i, params) in weights.layers.iter().enumerate() {
        let x = &acts[i];
        let in_shape = shapes[i];
        let out_len: usize = shapes[i + 1].iter().product();
        let y = match (&weights.spec.layers[i], params) {
            (Layer::Conv { .. }, LayerParams::Conv(k)) => {
                let mut y = Matrix::zeros(n, out_len);
                for b in 0..n {
                    conv_forward(x.row(b), in_shape, k, y.row_mut(b));
                }
                y
            }
            (Layer::Relu, _) => {
                let mut y = x.clone();
                y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                y
            }
            (Layer::AvgPool2, _) => {
                let mut y = Matrix::zeros(n, out_len);
                for b in 0..n {
                    pool_forward(x.row(b), in_shape, y.row_mut(b));
                }
                y
            }
            (Layer::Flatten, _) => x.clone(),
            (Layer::Linear { .. }, LayerParams::Linear { weight, bias }) => linear_forward(x, weight, bias),
            _ => unreachable!("parameters validated against spec"),
        };
        acts.push(y);
    }
    Ok(acts)
}

/// Runs the network on `batch`, capturing the input of every linear layer
/// listed in `taps`. Taps never change the logits.
pub fn forward(weights: &ModelWeights, batch: &Matrix, taps: &[usize]) -> Result<Forward> {
    for &t in taps {
        if !matches!(weights.spec.layers.get(t), Some(Layer::Linear { .. })) {
            return Err(Error::InvalidArgument(format!("layer {t} is not a linear layer")));
        }
    }
    let mut acts = forward_trace(weights, batch)?;
    let captured = taps
        .iter()
        .map(|&layer| ActivationTap {
            layer,
            x: acts[layer].clone(),
        })
        .collect();
    let logits = acts.pop().expect("at least the output");
    Ok(Forward { logits, taps: captured })
}

fn check_labels(labels: &[usize], classes: usize, n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Mean cross-entropy (stable log-sum-exp) and its gradient w.r.t. logits.
fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows();
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let z = logits.row(b);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - z[label];
        let g = grad.row_mut(b);
        for (j, gv) in g.iter_mut().enumerate() {
            *gv = (z[j] - lse).exp() / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    (loss / n as f64, grad)
}

fn prox_penalty(weights: &ModelWeights, prox: Option<Prox<'_>>) -> Result<f64> {
    match prox {
        Some(p) => Ok(0.5 * p.mu * weights.squared_distance(p.anchor)?),
        None => Ok(0.0),
    }
}

/// Training objective: mean cross-entropy plus the optional proximal term.
pub fn loss(weights: &ModelWeights, batch: &Matrix, labels: &[usize], prox: Option<Prox<'_>>) -> Result<f64> {
    check_labels(labels, weights.spec.classes, batch.rows())?;
    let logits = forward(weights, batch, &[])?.logits;
    Ok(cross_entropy(&logits, labels).0 + prox_penalty(weights, prox)?)
}

/// Objective value and its gradient, returned in a [`ModelWeights`] of the
/// same spec.
pub fn loss_and_gradients(
    weights: &ModelWeights,
    batch: &Matrix,
    labels: &[usize],
    prox: Option<Prox<'_>>,
) -> Result<(f64, ModelWeights)> {
    check_labels(labels, weights.spec.classes, batch.rows())?;
    let acts = forward_trace(weights, batch)?;
    let shapes = weights.spec.shapes()?;
    let (ce, mut dy) = cross_entropy(acts.last().expect("output"), labels);
    let n = batch.rows();
    let mut grads = ModelWeights::zeros(&weights.spec)?;

    for i in (0..weights.layers.len()).rev() {
        let x = &acts[i];
        let need_dx = i > 0;
        let in_len: usize = shapes[i].iter().product();
        dy = match (&weights.spec.layers[i], &weights.layers[i], &mut grads.layers[i]) {
            (Layer::Linear { .. }, LayerParams::Linear { weight, .. }, LayerParams::Linear { weight: dw, bias: db }) => {
                *dw = x.t_matmul(&dy)?;
                for r in 0..n {
                    db.iter_mut().zip(dy.row(r)).for_each(|(b, g)| *b += g);
                }
                if need_dx {
                    dy.matmul_t(weight)?
                } else {
                    dy
                }
            }
            (Layer::Conv { .. }, LayerParams::Conv(k), LayerParams::Conv(dk)) => {
                let mut dx = if need_dx { Some(Matrix::zeros(n, in_len)) } else { None };
                for b in 0..n {
                    let dx_row = dx.as_mut().map(|m| m.row_mut(b));
                    conv_backward(x.row(b), shapes[i], k, dy.row(b), dk, dx_row);
                }
                dx.unwrap_or(dy)
            }
            (Layer::Relu, _, _) => {
                let mut dx = dy;
                dx.as_mut_slice()
                    .iter_mut()
                    .zip(x.as_slice())
                    .for_each(|(g, &a)| {
                        if a <= 0.0 {
                            *g = 0.0
                        }
                    });
                dx
            }
            (Layer::AvgPool2, _, _) => {
                let mut dx = Matrix::zeros(n, in_len);
                for b in 0..n {
                    pool_backward(shapes[i], dy.row(b), dx.row_mut(b));
                }
                dx
            }
            (Layer::Flatten, _, _) => dy,
            _ => unreachable!("parameters validated against spec"),
        };
    }

    let mut total = ce;
    if let Some(p) = prox {
        weights.check_compatible(p.anchor)?;
        total += prox_penalty(weights, prox)?;
        let w = weights.param_slices();
        let a = p.anchor.param_slices();
        for ((g, w), a) in grads.param_slices_mut().into_iter().zip(w).zip(a) {
            for ((gv, wv), av) in g.iter_mut().zip(w).zip(a) {
                *gv += p.mu * (wv - av);
            }
        }
    }
    Ok((total, grads))
}

/// One SGD step. Returns the updated weights and the pre-step objective.
pub fn backward_sgd_step(
    weights: &ModelWeights,
    batch: &Matrix,
    labels: &[usize],
    lr: f64,
    prox: Option<Prox<'_>>,
) -> Result<(ModelWeights, f64)> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    let (loss, grads) = loss_and_gradients(weights, batch, labels, prox)?;
    if !loss.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    let mut out = weights.clone();
    if lr > 0.0 {
        for (w, g) in out.param_slices_mut().into_iter().zip(grads.param_slices()) {
            w.iter_mut().zip(g).for_each(|(wv, gv)| *wv -= lr * gv);
        }
    }
    Ok((out, loss))
}

/// Index of the largest logit per row, lowest index on ties.
pub fn predict(weights: &ModelWeights, batch: &Matrix) -> Result<Vec<usize>> {
    let logits = forward(weights, batch, &[])?.logits;
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    layer: usize,
    role: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    spec: ModelSpec,
    fingerprint: String,
    tensors: Vec<TensorEntry>,
}

impl Manifest for CheckpointManifest {
    fn payload_len(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum()
    }
}

fn manifest_for(weights: &ModelWeights) -> CheckpointManifest {
    let mut tensors = Vec::new();
    for (i, p) in weights.layers.iter().enumerate() {
        match p {
            LayerParams::Conv(t) => tensors.push(TensorEntry {
                layer: i,
                role: "conv".into(),
                shape: t.dims().to_vec(),
            }),
            LayerParams::Linear { weight, bias } => {
                tensors.push(TensorEntry {
                    layer: i,
                    role: "linear_weight".into(),
                    shape: vec![weight.rows(), weight.cols()],
                });
                tensors.push(TensorEntry {
                    layer: i,
                    role: "linear_bias".into(),
                    shape: vec![bias.len()],
                });
            }
            LayerParams::None => {}
        }
    }
    CheckpointManifest {
        spec: weights.spec.clone(),
        fingerprint: format!("{:016x}", weights.fingerprint),
        tensors,
    }
}

pub fn encode_checkpoint(weights: &ModelWeights) -> Result<Vec<u8>> {
    container::encode(CHECKPOINT_MAGIC, &manifest_for(weights), &weights.to_flat())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelWeights> {
    let (manifest, values): (CheckpointManifest, _) = container::decode(CHECKPOINT_MAGIC, bytes)?;
    let stored = u64::from_str_radix(&manifest.fingerprint, 16)
        .map_err(|_| Error::Format(format!("bad fingerprint {:?}", manifest.fingerprint)))?;
    let computed = manifest.spec.fingerprint();
    if stored != computed {
        return Err(Error::ArchitectureMismatch {
            expected: computed,
            found: stored,
        });
    }
    let mut weights = ModelWeights::zeros(&manifest.spec).map_err(|e| Error::Format(e.to_string()))?;
    let expected = manifest_for(&weights);
    let same_layout = expected.tensors.len() == manifest.tensors.len()
        && expected
            .tensors
            .iter()
            .zip(&manifest.tensors)
            .all(|(a, b)| a.layer == b.layer && a.role == b.role && a.shape == b.shape);
    if !same_layout {
        return Err(Error::Format("tensor table does not match the spec".into()));
    }
    let mut offset = 0;
    for dst in weights.param_slices_mut() {
        dst.copy_from_slice(&values[offset..offset + dst.len()]);
        offset += dst.len();
    }
    Ok(weights)
}

pub fn save_checkpoint(weights: &ModelWeights, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(weights)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and insists on a particular spec.
pub fn load_checkpoint_for(path: &Path, expected: &ModelSpec) -> Result<ModelWeights> {
    let w = load_checkpoint(path)?;
    if w.fingerprint != expected.fingerprint() {
        return Err(Error::ArchitectureMismatch {
            expected: expected.fingerprint(),
            found: w.fingerprint,
        });
    }
    Ok(w)
}
