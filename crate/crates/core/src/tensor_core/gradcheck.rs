//! Central finite-difference verification of backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec::Execution;

pub const GRAD_CHECK_EPS: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms; exact zeros
/// (e.g. key biases under softmax) would otherwise divide FD noise by zero.
const SCALE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-leaf relative error.
    pub max_rel_error: f64,
    /// `(leaf name, relative error)` in leaf order.
    pub per_leaf: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares analytic gradients against central differences for every
/// element of every leaf.
///
/// The scalar loss is a fixed positive-weighted sum of the outputs; weights
/// are drawn from `[0.5, 1.5)` so that rules whose plain-sum gradient
/// vanishes (softmax rows, normalization) are still exercised. The relative
/// error of a leaf is `max |analytic - numeric| / max(max |numeric|,
/// max |analytic|, 1e-4)`.
pub fn grad_check<F>(leaves: &[(String, Tensor)], build: F, eps: f64, exec: Execution) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    let run = |values: &[&Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input((*t).clone(), true)).collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let base: Vec<&Tensor> = leaves.iter().map(|(_, t)| t).collect();
    let (mut g, vars, out) = run(&base)?;
    let out_shape = g.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let weights = Tensor::from_fn(out_shape, |_, _, _, _| rng.random_range(0.5..1.5));
    if !g.value(out).is_finite() {
        return Err(Error::NonFinite("grad_check forward".into()));
    }
    let grads = g.backward(out, weights.clone())?;
    let analytic: Vec<Tensor> =
        vars.iter().zip(leaves).map(|(v, (_, t))| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();

    let loss_at = |leaf: usize, elem: usize, delta: f64| -> Result<f64> {
        let mut perturbed = leaves[leaf].1.clone();
        perturbed.data_mut()[elem] += delta;
        let values: Vec<&Tensor> = leaves.iter().enumerate().map(|(i, (_, t))| if i == leaf { &perturbed } else { t }).collect();
        let (g, _, out) = run(&values)?;
        let y = g.value(out);
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("grad_check perturbation of {}", leaves[leaf].0)));
        }
        Ok(y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let mut per_leaf = Vec::with_capacity(leaves.len());
    for (li, (name, t)) in leaves.iter().enumerate() {
        let numeric = exec.try_map_range(t.len(), |e| Ok::<_, Error>((loss_at(li, e, eps)? - loss_at(li, e, -eps)?) / (2.0 * eps)))?;
        let a = analytic[li].data();
        let scale = numeric.iter().chain(a).fold(SCALE_FLOOR, |m, v| m.max(v.abs()));
        let err = numeric.iter().zip(a).map(|(n, a)| (n - a).abs()).fold(0.0, f64::max) / scale;
        per_leaf.push((name.clone(), err));
    }
    let max_rel_error = per_leaf.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, per_leaf })
}

/// Redraws every entry closer than `margin` to zero until it is not, so that
/// ReLU inputs stay away from the kink.
pub fn resample_near_kinks<R: Rng + ?Sized>(t: &mut Tensor, margin: f64, rng: &mut R) {
    for v in t.data_mut() {
        while v.abs() < margin {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}
