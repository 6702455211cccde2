//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Compare reverse-mode gradients of a scalar function against central
/// differences.
///
/// `build` records the function on a fresh graph given one leaf per input and
/// returns the scalar output. The result is the maximum over every input
/// element of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<T, F>(inputs: &[Tensor<T>], epsilon: T, build: F) -> Result<T>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst = T::zero();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let two = T::lit(2.0);
    for (idx, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[idx].len() {
            let orig = inputs[idx].data()[e];
            work[idx].data_mut()[e] = orig + epsilon;
            let up = eval(&work)?;
            work[idx].data_mut()[e] = orig - epsilon;
            let down = eval(&work)?;
            work[idx].data_mut()[e] = orig;
            let numeric = (up - down) / (two * epsilon);
            let err = (grad.data()[e] - numeric).abs() / numeric.abs().max(T::one());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
