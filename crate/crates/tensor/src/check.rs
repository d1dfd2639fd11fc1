//! Central-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Deterministic probe weights used to reduce a tensor-valued function to
/// a scalar. They stay inside `[0.5, 1.5]` so no output is ignored.
pub fn probe_weights<T: Real>(n: usize) -> Vec<T> {
    (0..n).map(|k| T::lit(1.0 + 0.5 * (1.3 * k as f64 + 0.7).sin())).collect()
}

/// `|analytic - numeric| / (|numeric| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-12)
}

fn reduce<T: Real>(g: &mut Graph<T>, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    if n == 1 && g.value(y).ndim() == 0 {
        return Ok(y);
    }
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::new(shape, probe_weights(n))?);
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

/// Max relative error between the reverse-mode gradient of `f` at `x` and
/// central differences with step `eps`. Non-scalar outputs are reduced
/// with [`probe_weights`].
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let errs = finite_diff_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

/// [`finite_diff_check`] over several inputs; returns one max relative
/// error per input.
pub fn finite_diff_check_many<T, F>(f: F, inputs: &[Tensor<T>], eps: T) -> Result<Vec<T>>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let worst = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(&a, &n)| relative_error(a.as_f64(), n.as_f64()))
                .fold(0.0f64, f64::max);
            T::lit(worst)
        })
        .collect())
}

/// Reverse-mode gradients of the probe-reduced `f` for every input.
pub fn analytic_gradients<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let loss = reduce(&mut g, y)?;
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

/// Probe-reduced value of `f` with every input held constant.
pub fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let loss = reduce(&mut g, y)?;
    g.value(loss).item()
}

/// Central-difference gradients of the probe-reduced `f`.
pub fn numeric_gradients<T, F>(f: &F, inputs: &[Tensor<T>], eps: T) -> Result<Vec<Tensor<T>>>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape().to_vec());
        for k in 0..inputs[i].len() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + eps;
            let plus = evaluate(f, &work)?;
            work[i].data_mut()[k] = orig - eps;
            let minus = evaluate(f, &work)?;
            work[i].data_mut()[k] = orig;
            grad.data_mut()[k] = (plus - minus) / (eps + eps);
        }
        out.push(grad);
    }
    Ok(out)
}
