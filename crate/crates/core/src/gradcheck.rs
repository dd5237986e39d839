//! Central finite-difference gradients for verifying the analytic backward
//! passes. These helpers only ever call [`forward`](crate::nn::forward) plus
//! a scalar loss of the logits, so they stay independent of the reverse-mode
//! code they are used to check. Intended for tests and small networks; cost
//! is two forward passes per scalar parameter.

use crate::nn::{forward, NetworkSpec, ParamSet};
use crate::tensor::Tensor;

fn loss_at(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor, loss: &dyn Fn(&Tensor) -> f64) -> f64 {
    let (logits, _) = forward(spec, params, batch).expect("gradcheck forward");
    loss(&logits)
}

fn poke(params: &ParamSet, layer: usize, weight: bool, idx: usize, delta: f64) -> ParamSet {
    let mut out = params.clone();
    let lp = &mut out.layers_mut()[layer];
    let t = if weight { &mut lp.weight } else { &mut lp.bias };
    t.data_mut()[idx] += delta;
    out
}

/// Central differences of `loss(forward(params))` with respect to every
/// weight and bias.
pub fn fd_param_grads(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Tensor,
    step: f64,
    loss: impl Fn(&Tensor) -> f64,
) -> ParamSet {
    let mut grads = params.zeros_like();
    for li in 0..params.layers().len() {
        for weight in [true, false] {
            let n = if weight {
                params.layers()[li].weight.len()
            } else {
                params.layers()[li].bias.len()
            };
            for idx in 0..n {
                let plus = poke(params, li, weight, idx, step);
                let minus = poke(params, li, weight, idx, -step);
                let g = (loss_at(spec, &plus, batch, &loss)
                    - loss_at(spec, &minus, batch, &loss))
                    / (2.0 * step);
                let lp = &mut grads.layers_mut()[li];
                let t = if weight { &mut lp.weight } else { &mut lp.bias };
                t.data_mut()[idx] = g;
            }
        }
    }
    grads
}

/// Central differences of `loss(forward(batch))` with respect to the batch.
pub fn fd_input_grads(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Tensor,
    step: f64,
    loss: impl Fn(&Tensor) -> f64,
) -> Tensor {
    let mut grad = Tensor::zeros(batch.shape().to_vec());
    for idx in 0..batch.len() {
        let mut plus = batch.clone();
        let mut minus = batch.clone();
        plus.data_mut()[idx] += step;
        minus.data_mut()[idx] -= step;
        grad.data_mut()[idx] = (loss_at(spec, params, &plus, &loss)
            - loss_at(spec, params, &minus, &loss))
            / (2.0 * step);
    }
    grad
}

/// Central differences of an arbitrary scalar function of one tensor.
pub fn fd_tensor_grad(t: &Tensor, step: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(t.shape().to_vec());
    for idx in 0..t.len() {
        let mut plus = t.clone();
        let mut minus = t.clone();
        plus.data_mut()[idx] += step;
        minus.data_mut()[idx] -= step;
        grad.data_mut()[idx] = (f(&plus) - f(&minus)) / (2.0 * step);
    }
    grad
}

fn rel_error(a: f64, b: f64) -> f64 {
    let denom = (a.abs() + b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Worst relative error between two gradient tensors.
pub fn max_rel_error_tensor(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Worst relative error across every layer of two gradient sets.
pub fn max_rel_error_params(analytic: &ParamSet, numeric: &ParamSet) -> f64 {
    analytic
        .layers()
        .iter()
        .zip(numeric.layers())
        .map(|(a, n)| {
            max_rel_error_tensor(&a.weight, &n.weight)
                .max(max_rel_error_tensor(&a.bias, &n.bias))
        })
        .fold(0.0, f64::max)
}
