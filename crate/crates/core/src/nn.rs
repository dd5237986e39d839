//! Minimal dense network engine with reverse-mode gradients.
//!
//! Gradients are available with respect to both parameters (outer training
//! loop) and inputs (every gradient-based attack needs them). All math is
//! 64-bit; forward is pure, so repeated calls with the same inputs produce
//! bitwise-identical logits.

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Tensor;

/// One layer of a [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    Relu,
}

/// Immutable architecture description: input width, layer stack, class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    input_dim: usize,
    layers: Vec<LayerSpec>,
    num_classes: usize,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            layers,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A fully connected net with ReLU between hidden layers:
    /// `input -> hidden[0] -> ... -> num_classes`.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() * 2 + 1);
        for &h in hidden {
            layers.push(LayerSpec::Dense { units: h });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { units: num_classes });
        Self::new(input_dim, layers, num_classes)
    }

    /// Checks internal consistency; also used when loading checkpoints.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig(
                "input_dim and num_classes must be positive".into(),
            ));
        }
        if !self.layers.iter().any(|l| matches!(l, LayerSpec::Dense { .. })) {
            return Err(Error::InvalidConfig(
                "network needs at least one dense layer".into(),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Dense { units: 0 } = layer {
                return Err(Error::InvalidConfig(format!(
                    "dense layer at index {i} has zero units"
                )));
            }
        }
        let out = self.layer_dims().pop().unwrap();
        if out != self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "final layer produces {} outputs but num_classes is {}",
                out, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output width of each layer, in order.
    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_dim;
        for layer in &self.layers {
            if let LayerSpec::Dense { units } = layer {
                cur = *units;
            }
            dims.push(cur);
        }
        dims
    }

    /// Glorot-uniform weights, zero biases, drawn from `rng` layer by layer.
    pub fn init_params(&self, rng: &mut Prng) -> ParamSet {
        let mut layers = Vec::new();
        let mut fan_in = self.input_dim;
        let mut idx = 0;
        for layer in &self.layers {
            if let LayerSpec::Dense { units } = layer {
                let fan_out = *units;
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-a..a))
                    .collect();
                layers.push(LayerParams {
                    name: format!("dense{idx}"),
                    weight: Tensor::new(vec![fan_in, fan_out], data).unwrap(),
                    bias: Tensor::zeros(vec![fan_out]),
                });
                fan_in = fan_out;
                idx += 1;
            }
        }
        ParamSet { layers }
    }

    /// Verifies that `params` has the structure this spec produces.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let mut dense_shapes = Vec::new();
        let mut fan_in = self.input_dim;
        for layer in &self.layers {
            if let LayerSpec::Dense { units } = layer {
                dense_shapes.push((fan_in, *units));
                fan_in = *units;
            }
        }
        if dense_shapes.len() != params.layers.len() {
            return Err(Error::ShapeMismatch {
                context: "check_params".into(),
                expected: format!("{} dense layers", dense_shapes.len()),
                actual: format!("{} dense layers", params.layers.len()),
            });
        }
        for (i, ((fin, fout), lp)) in dense_shapes.iter().zip(&params.layers).enumerate() {
            if lp.weight.shape() != [*fin, *fout] || lp.bias.shape() != [*fout] {
                return Err(Error::ShapeMismatch {
                    context: format!("layer {} (index {})", lp.name, i),
                    expected: format!("weight [{fin}, {fout}], bias [{fout}]"),
                    actual: format!(
                        "weight {:?}, bias {:?}",
                        lp.weight.shape(),
                        lp.bias.shape()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Weights and bias of one dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub name: String,
    /// `[fan_in, fan_out]`, row-major.
    pub weight: Tensor,
    /// `[fan_out]`.
    pub bias: Tensor,
}

/// Ordered collection of per-layer parameters for one network.
///
/// Two `ParamSet`s produced by the same [`NetworkSpec`] are element-wise
/// combinable, which is what aggregation and SGD rely on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    layers: Vec<LayerParams>,
}

impl ParamSet {
    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn structure_matches(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.same_shape(&b.weight) && a.bias.same_shape(&b.bias))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    name: l.name.clone(),
                    weight: Tensor::zeros(l.weight.shape().to_vec()),
                    bias: Tensor::zeros(l.bias.shape().to_vec()),
                })
                .collect(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64 + Copy) -> Result<Self> {
        if !self.structure_matches(other) {
            return Err(Error::ShapeMismatch {
                context: "ParamSet element-wise op".into(),
                expected: "matching layer structures".into(),
                actual: "mismatched structures".into(),
            });
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                Ok(LayerParams {
                    name: a.name.clone(),
                    weight: a.weight.zip_with(&b.weight, f)?,
                    bias: a.bias.zip_with(&b.bias, f)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self + s * other`, element-wise.
    pub fn axpy(&self, s: f64, other: &Self) -> Result<Self> {
        self.zip_with(other, move |a, b| a + s * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    name: l.name.clone(),
                    weight: l.weight.scale(s),
                    bias: l.bias.scale(s),
                })
                .collect(),
        }
    }

    /// Squared L2 distance summed over every weight and bias.
    pub fn sq_distance(&self, other: &Self) -> Result<f64> {
        if !self.structure_matches(other) {
            return Err(Error::ShapeMismatch {
                context: "ParamSet::sq_distance".into(),
                expected: "matching layer structures".into(),
                actual: "mismatched structures".into(),
            });
        }
        let mut acc = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                acc += (x - y) * (x - y);
            }
            for (x, y) in a.bias.data().iter().zip(b.bias.data()) {
                acc += (x - y) * (x - y);
            }
        }
        Ok(acc)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                a.weight
                    .max_abs_diff(&b.weight)
                    .max(a.bias.max_abs_diff(&b.bias))
            })
            .fold(0.0, f64::max)
    }

    #[doc(hidden)]
    pub fn from_layers(layers: Vec<LayerParams>) -> Self {
        Self { layers }
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }
}

/// Cached activations from one [`forward`] call.
///
/// A trace supports one parameter-gradient pass and one input-gradient pass;
/// it borrows the parameters it was computed from, so they cannot change
/// underneath it, and it is confined to the thread that created it.
pub struct ForwardTrace<'a> {
    spec: &'a NetworkSpec,
    params: &'a ParamSet,
    batch: &'a Tensor,
    /// `inner[i]` is the output of layer `i` (input to layer `i + 1`).
    inner: Vec<Tensor>,
    params_done: Cell<bool>,
    input_done: Cell<bool>,
}

impl<'a> ForwardTrace<'a> {
    fn input_of(&self, layer: usize) -> &Tensor {
        if layer == 0 {
            self.batch
        } else {
            &self.inner[layer - 1]
        }
    }
}

fn dense_forward(x: &Tensor, lp: &LayerParams) -> Tensor {
    let (m, fan_in) = (x.rows(), x.cols());
    let fan_out = lp.bias.len();
    let w = lp.weight.data();
    let b = lp.bias.data();
    let mut out = Tensor::zeros(vec![m, fan_out]);
    for i in 0..m {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        oi.copy_from_slice(b);
        for (k, &a) in xi.iter().enumerate().take(fan_in) {
            let wk = &w[k * fan_out..(k + 1) * fan_out];
            for (o, &wv) in oi.iter_mut().zip(wk) {
                *o += a * wv;
            }
        }
    }
    out
}

/// Runs the network on a `[m, input_dim]` batch, returning `[m, num_classes]`
/// logits and a trace for the backward passes.
pub fn forward<'a>(
    spec: &'a NetworkSpec,
    params: &'a ParamSet,
    batch: &'a Tensor,
) -> Result<(Tensor, ForwardTrace<'a>)> {
    spec.check_params(params)?;
    if !batch.is_matrix() || batch.cols() != spec.input_dim() {
        return Err(Error::ShapeMismatch {
            context: "forward input".into(),
            expected: format!("[m, {}]", spec.input_dim()),
            actual: format!("{:?}", batch.shape()),
        });
    }

    let mut inner = Vec::with_capacity(spec.layers().len());
    let mut dense_idx = 0;
    for layer in spec.layers() {
        let x = inner.last().unwrap_or(batch);
        let out = match layer {
            LayerSpec::Dense { .. } => {
                let out = dense_forward(x, &params.layers[dense_idx]);
                dense_idx += 1;
                out
            }
            LayerSpec::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        };
        inner.push(out);
    }
    let logits = inner.pop().unwrap();
    logits.check_finite("forward logits")?;
    Ok((
        logits.clone(),
        ForwardTrace {
            spec,
            params,
            batch,
            inner,
            params_done: Cell::new(false),
            input_done: Cell::new(false),
        },
    ))
}

fn backprop(
    trace: &ForwardTrace<'_>,
    logit_grad: &Tensor,
    want_params: bool,
    want_input: bool,
) -> Result<(Option<ParamSet>, Option<Tensor>)> {
    let m = trace.batch.rows();
    let c = trace.spec.num_classes();
    if !logit_grad.is_matrix() || logit_grad.rows() != m || logit_grad.cols() != c {
        return Err(Error::ShapeMismatch {
            context: "backward logit gradient".into(),
            expected: format!("[{m}, {c}]"),
            actual: format!("{:?}", logit_grad.shape()),
        });
    }

    let mut delta = logit_grad.clone();
    let mut rev_grads: Vec<LayerParams> = Vec::new();
    let mut dense_idx = trace.params.layers.len();

    for (li, layer) in trace.spec.layers().iter().enumerate().rev() {
        let input = trace.input_of(li);
        match layer {
            LayerSpec::Dense { .. } => {
                dense_idx -= 1;
                let lp = &trace.params.layers[dense_idx];
                let (fan_in, fan_out) = (lp.weight.shape()[0], lp.weight.shape()[1]);
                if want_params {
                    let mut dw = Tensor::zeros(vec![fan_in, fan_out]);
                    let mut db = Tensor::zeros(vec![fan_out]);
                    for i in 0..m {
                        let xi = input.row(i);
                        let di = delta.row(i);
                        for (k, &xv) in xi.iter().enumerate() {
                            let dwk = &mut dw.data_mut()[k * fan_out..(k + 1) * fan_out];
                            for (g, &dv) in dwk.iter_mut().zip(di) {
                                *g += xv * dv;
                            }
                        }
                        for (g, &dv) in db.data_mut().iter_mut().zip(di) {
                            *g += dv;
                        }
                    }
                    rev_grads.push(LayerParams {
                        name: lp.name.clone(),
                        weight: dw,
                        bias: db,
                    });
                }
                if li > 0 || want_input {
                    let w = lp.weight.data();
                    let mut dx = Tensor::zeros(vec![m, fan_in]);
                    for i in 0..m {
                        let di = delta.row(i);
                        let dxi = dx.row_mut(i);
                        for (k, slot) in dxi.iter_mut().enumerate() {
                            let wk = &w[k * fan_out..(k + 1) * fan_out];
                            *slot = di.iter().zip(wk).map(|(&d, &wv)| d * wv).sum();
                        }
                    }
                    delta = dx;
                }
            }
            LayerSpec::Relu => {
                delta = delta.zip_with(input, |d, x| if x > 0.0 { d } else { 0.0 })?;
            }
        }
    }

    let param_grads = want_params.then(|| {
        rev_grads.reverse();
        ParamSet { layers: rev_grads }
    });
    let input_grad = want_input.then_some(delta);
    Ok((param_grads, input_grad))
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradient at the logits.
pub fn backward_params(trace: &ForwardTrace<'_>, logit_grad: &Tensor) -> Result<ParamSet> {
    if trace.params_done.get() {
        return Err(Error::TraceConsumed("parameter"));
    }
    let (grads, _) = backprop(trace, logit_grad, true, false)?;
    trace.params_done.set(true);
    Ok(grads.unwrap())
}

/// Gradient of a scalar loss with respect to the input batch.
pub fn backward_input(trace: &ForwardTrace<'_>, logit_grad: &Tensor) -> Result<Tensor> {
    if trace.input_done.get() {
        return Err(Error::TraceConsumed("input"));
    }
    let (_, grad) = backprop(trace, logit_grad, false, true)?;
    trace.input_done.set(true);
    Ok(grad.unwrap())
}

/// One plain SGD update: `params - lr * grads`.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    params.axpy(-lr, grads)
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Row-wise softmax with max-subtraction stabilization.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (m, c) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(vec![m, c]);
    let mut ls = vec![0.0; c];
    for i in 0..m {
        log_softmax_row(logits.row(i), &mut ls);
        for (o, &v) in out.row_mut(i).iter_mut().zip(&ls) {
            *o = v.exp();
        }
    }
    out
}

/// Mean cross-entropy over the batch and its gradient at the logits,
/// `(softmax - onehot) / m`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (m, c) = (logits.rows(), logits.cols());
    if labels.len() != m {
        return Err(Error::ShapeMismatch {
            context: "softmax_cross_entropy labels".into(),
            expected: format!("{m} labels"),
            actual: format!("{}", labels.len()),
        });
    }
    for &y in labels {
        if y >= c {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: c,
            });
        }
    }

    let mut loss = 0.0;
    let mut grad = Tensor::zeros(vec![m, c]);
    let mut ls = vec![0.0; c];
    let inv_m = 1.0 / m as f64;
    for i in 0..m {
        log_softmax_row(logits.row(i), &mut ls);
        loss -= ls[labels[i]];
        let gi = grad.row_mut(i);
        for (g, &lv) in gi.iter_mut().zip(&ls) {
            *g = lv.exp() * inv_m;
        }
        gi[labels[i]] -= inv_m;
    }
    Ok((loss * inv_m, grad))
}

/// Batch-mean `KL(softmax(logits_p) || softmax(logits_q))` with gradients
/// for both logit sets.
pub fn kl_divergence_parts(logits_p: &Tensor, logits_q: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    if !logits_p.same_shape(logits_q) || !logits_p.is_matrix() {
        return Err(Error::ShapeMismatch {
            context: "kl_divergence".into(),
            expected: format!("{:?}", logits_p.shape()),
            actual: format!("{:?}", logits_q.shape()),
        });
    }
    let (m, c) = (logits_p.rows(), logits_p.cols());
    let inv_m = 1.0 / m as f64;
    let mut loss = 0.0;
    let mut grad_p = Tensor::zeros(vec![m, c]);
    let mut grad_q = Tensor::zeros(vec![m, c]);
    let mut lp = vec![0.0; c];
    let mut lq = vec![0.0; c];
    for i in 0..m {
        log_softmax_row(logits_p.row(i), &mut lp);
        log_softmax_row(logits_q.row(i), &mut lq);
        let kl: f64 = lp
            .iter()
            .zip(&lq)
            .map(|(&a, &b)| a.exp() * (a - b))
            .sum();
        loss += kl.max(0.0);
        let gp = grad_p.row_mut(i);
        let gq = grad_q.row_mut(i);
        for j in 0..c {
            let p = lp[j].exp();
            let q = lq[j].exp();
            gp[j] = p * ((lp[j] - lq[j]) - kl) * inv_m;
            gq[j] = (q - p) * inv_m;
        }
    }
    Ok((loss * inv_m, grad_p, grad_q))
}

/// Batch-mean KL divergence between softmax distributions; the gradient
/// flows into `logits_p` only (`logits_q` is treated as frozen).
pub fn kl_divergence(logits_p: &Tensor, logits_q: &Tensor) -> Result<(f64, Tensor)> {
    let (loss, grad_p, _) = kl_divergence_parts(logits_p, logits_q)?;
    Ok((loss, grad_p))
}
