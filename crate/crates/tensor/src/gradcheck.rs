//! Reverse-mode vs central finite differences.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Deterministic probe weights used to reduce non-scalar outputs.
pub fn probe(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.7548776662466927).fract() - 0.5)
}

fn scalar_out(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    if g.value(out).numel() == 1 {
        Ok(out)
    } else {
        let r = probe(g.shape(out));
        g.weighted_sum(out, &r)
    }
}

fn eval(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let out = scalar_out(&mut g, out)?;
    Ok(g.value(out).item())
}

/// Compares every input entry. See [`grad_check_sampled`].
pub fn grad_check(
    inputs: &[Tensor<f64>],
    step: f64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    grad_check_sampled(inputs, step, usize::MAX, f)
}

/// Builds `f` on differentiable copies of `inputs`, reduces a non-scalar
/// output with [`probe`] weights, and compares the reverse-mode gradient of
/// up to `per_input` evenly spaced entries of each input against
/// `(f(x + h) - f(x - h)) / 2h`.
///
/// Relative error is `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn grad_check_sampled(
    inputs: &[Tensor<f64>],
    step: f64,
    per_input: usize,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(TensorError::Config("grad_check step must be positive".into()));
    }
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let out = scalar_out(&mut g, out)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0 };
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let stride = n.div_ceil(per_input.min(n).max(1));
        for j in (0..n).step_by(stride.max(1)) {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + step;
            let fp = eval(&work, &f)?;
            work[i].data_mut()[j] = x0 - step;
            let fm = eval(&work, &f)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
