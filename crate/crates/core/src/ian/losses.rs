//! Loss terms as graph nodes. Adversarial losses take log-probabilities
//! `[B, 3]` straight from `log_softmax`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Real;

use super::model::{GENERATED, REAL, RECONSTRUCTED};

/// Floor on `1 - p_real` in the binary loss.
const BINARY_FLOOR: f64 = 1e-7;

/// Mean absolute difference.
pub fn pixel_loss<T: Real>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let d = g.sub(x, y)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Sum over layers of the per-layer mean squared difference.
pub fn feature_loss<T: Real>(g: &mut Graph<T>, a: &[Var], b: &[Var]) -> Result<Var> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "feature_loss",
            axis: "layer count".into(),
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut total: Option<Var> = None;
    for (&fa, &fb) in a.iter().zip(b) {
        let d = g.sub(fa, fb)?;
        let sq = g.square(d);
        let m = g.mean(sq);
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    Ok(total.expect("nonempty"))
}

/// `-½ Σ_i (1 + log σ²_i - μ²_i - σ²_i)` per sample, averaged over the batch.
pub fn kl_divergence<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    let batch = g.shape(mu)[0];
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let a = g.add_scalar(logvar, T::one());
    let b = g.sub(a, mu2)?;
    let c = g.sub(b, var)?;
    let s = g.sum(c);
    Ok(g.mul_scalar(s, T::lit(-0.5 / batch as f64)))
}

/// `-mean_b logp[b, class]`.
pub fn class_nll<T: Real>(g: &mut Graph<T>, logp: Var, class: usize) -> Result<Var> {
    let col = g.pick_column(logp, class)?;
    let m = g.mean(col);
    Ok(g.neg(m))
}

fn sum_all<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Categorical cross-entropy of each stream against its own label.
pub fn ternary_d_loss<T: Real>(g: &mut Graph<T>, real: Var, generated: Var, reconstructed: Var) -> Result<Var> {
    let a = class_nll(g, real, REAL)?;
    let b = class_nll(g, generated, GENERATED)?;
    let c = class_nll(g, reconstructed, RECONSTRUCTED)?;
    sum_all(g, &[a, b, c])
}

/// Both fake streams pushed toward the "real" label.
pub fn ternary_g_loss<T: Real>(g: &mut Graph<T>, generated: Var, reconstructed: Var) -> Result<Var> {
    let a = class_nll(g, generated, REAL)?;
    let b = class_nll(g, reconstructed, REAL)?;
    g.add(a, b)
}

/// `-mean log(1 - p_real)`, floored away from `log 0`.
fn fake_nll<T: Real>(g: &mut Graph<T>, logp: Var) -> Result<Var> {
    let lr = g.pick_column(logp, REAL)?;
    let p = g.exp(lr);
    let q = g.neg(p);
    let q = g.add_scalar(q, T::one());
    let q = g.clamp(q, T::lit(BINARY_FLOOR), T::one());
    let l = g.log(q);
    let m = g.mean(l);
    Ok(g.neg(m))
}

/// Real-vs-fake loss with reconstructions counted as fake; only the "real"
/// output unit carries meaning.
pub fn binary_d_loss<T: Real>(g: &mut Graph<T>, real: Var, generated: Var, reconstructed: Var) -> Result<Var> {
    let a = class_nll(g, real, REAL)?;
    let b = fake_nll(g, generated)?;
    let c = fake_nll(g, reconstructed)?;
    sum_all(g, &[a, b, c])
}
