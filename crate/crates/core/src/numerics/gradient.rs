//! Loss evaluation with analytic gradients, and the central-difference
//! estimate used to check them.

use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Runs `graph` on a fresh tape and returns the loss together with the
/// gradient of every parameter in `params` (declaration order).
///
/// `graph` receives the tape and one [`Var`] per parameter and must return a
/// scalar.
pub fn evaluate_with_gradients<T, F>(params: &ParamSet<T>, graph: F) -> Result<(T, Vec<Tensor<T>>)>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = tape.params(params)?;
    let loss = graph(&mut tape, &vars)?;
    let value = scalar_value(&tape, loss)?;
    let grads = tape.backward(loss, params)?;
    Ok((value, grads))
}

/// Forward value only.
pub fn evaluate<T, F>(params: &ParamSet<T>, graph: &F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = tape.params(params)?;
    let loss = graph(&mut tape, &vars)?;
    scalar_value(&tape, loss)
}

fn scalar_value<T: Scalar>(tape: &Tape<'_, T>, loss: Var) -> Result<T> {
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::Shape {
            op: "loss",
            detail: format!("expected a scalar, got shape {:?}", v.shape()),
        });
    }
    Ok(v.data()[0])
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε`, one coordinate at a time.
pub fn finite_diff_gradient<F>(params: &ParamSet<f64>, graph: F, epsilon: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for id in 0..params.len() {
        let mut grad = Tensor::zeros(params.value(id).shape());
        for j in 0..params.value(id).len() {
            let orig = params.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + epsilon;
            let plus = evaluate(&work, &graph)?;
            work.value_mut(id).data_mut()[j] = orig - epsilon;
            let minus = evaluate(&work, &graph)?;
            work.value_mut(id).data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * epsilon);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over all coordinates.
pub fn max_relative_error(a: &[Tensor<f64>], b: &[Tensor<f64>], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&p, &q)| (p - q).abs() / p.abs().max(q.abs()).max(floor))
        .fold(0.0, f64::max)
}
