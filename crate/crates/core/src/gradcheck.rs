//! Central finite-difference gradient checking.
//!
//! Everything here only evaluates forward passes; it never reads the tape's
//! reverse pass, so it can serve as an independent oracle for it.

use crate::graph::{Graph, Var};
use crate::model::layers::Forward;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// One compared coordinate.
#[derive(Debug, Clone, Copy)]
pub struct GradSample {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|)`, or 0 when both are below `floor`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let diff = (self.analytic - self.numeric).abs();
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < floor {
            0.0
        } else {
            diff / scale
        }
    }
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` of a scalar function of a tensor.
pub fn central_difference(f: &mut dyn FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, index: usize, h: f64) -> f64 {
    let mut xp = x.clone();
    xp.data_mut()[index] += h;
    let mut xm = x.clone();
    xm.data_mut()[index] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Compare tape gradients of `build` against central differences.
///
/// `build` receives a fresh graph and one differentiable leaf per input and
/// must return a one-element node. `indices(i, len)` picks which coordinates
/// of input `i` to probe.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    indices: &dyn Fn(usize, usize) -> Vec<usize>,
    h: f64,
) -> Vec<GradSample> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.item(out)
    };

    let mut samples = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for idx in indices(i, x.len()) {
            let mut f = |xi: &Tensor<f64>| {
                let mut ts = inputs.to_vec();
                ts[i] = xi.clone();
                eval(&ts)
            };
            let numeric = central_difference(&mut f, x, idx, h);
            samples.push(GradSample { input: i, index: idx, analytic: analytic.data()[idx], numeric });
        }
    }
    samples
}

/// Worst relative error over a set of samples.
pub fn max_rel_error(samples: &[GradSample], floor: f64) -> f64 {
    samples.iter().map(|s| s.rel_error(floor)).fold(0.0, f64::max)
}

/// Gradient check through a model forward pass, covering inputs and parameters.
///
/// Inputs are numbered `0..inputs.len()`; parameter `p` of `params` is reported
/// as input `inputs.len() + p`.
pub fn check_forward(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    params: &[ParamId],
    build: &dyn Fn(&mut Forward<'_, f64>, &[Var]) -> Var,
    indices: &dyn Fn(usize, usize) -> Vec<usize>,
    h: f64,
) -> Vec<GradSample> {
    let mut f = Forward::eval(store);
    let vars: Vec<Var> = inputs.iter().map(|t| f.g.variable(t.clone())).collect();
    let pvars: Vec<Var> = params.iter().map(|&id| f.p(id)).collect();
    let out = build(&mut f, &vars);
    let grads = f.g.backward(out);

    let eval = |store: &ParamStore<f64>, ts: &[Tensor<f64>]| -> f64 {
        let mut f = Forward::eval(store);
        let vars: Vec<Var> = ts.iter().map(|t| f.constant(t.clone())).collect();
        let out = build(&mut f, &vars);
        f.g.item(out)
    };

    let mut samples = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for idx in indices(i, x.len()) {
            let mut f = |xi: &Tensor<f64>| {
                let mut ts = inputs.to_vec();
                ts[i] = xi.clone();
                eval(store, &ts)
            };
            let numeric = central_difference(&mut f, x, idx, h);
            samples.push(GradSample { input: i, index: idx, analytic: analytic.data()[idx], numeric });
        }
    }
    for (p, &id) in params.iter().enumerate() {
        let value = store.get(id).value.clone();
        let analytic = grads.wrt(pvars[p]).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
        for idx in indices(inputs.len() + p, value.len()) {
            let mut local = store.clone();
            let mut f = |v: &Tensor<f64>| {
                local.get_mut(id).value = v.clone();
                eval(&local, inputs)
            };
            let numeric = central_difference(&mut f, &value, idx, h);
            samples.push(GradSample { input: inputs.len() + p, index: idx, analytic: analytic.data()[idx], numeric });
        }
    }
    samples
}
