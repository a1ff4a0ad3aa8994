//! Central finite-difference gradient checking.

use serde::Serialize;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{GcrError, Result};
use crate::loss::GcrConfig;
use crate::model::Network;
use crate::tensor::Tensor;
use crate::train::objective;

/// Per-coordinate comparison returned by [`gradient_report`].
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest `|a - n| / max(1e-8, |a| + |n|)` over coordinates.
    pub max_rel_error: f64,
    /// Coordinate where the maximum occurs.
    pub worst: usize,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(1e-8, a.abs() + n.abs())
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let val = tape.value(out);
    if val.len() != 1 {
        return Err(GcrError::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            val.shape()
        )));
    }
    Ok(val.item())
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` builds a scalar on a fresh tape from the differentiable leaf it is
/// given. It is evaluated twice at `x` first; differing results are a
/// contract error.
pub fn gradient_report<F>(f: F, x: &Tensor, eps: f64) -> Result<GradientReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(GcrError::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(v, x.shape()).into_data();

    let first = tape.value(out).item();
    let second = eval(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(GcrError::Contract(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let (worst, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradientReport {
        analytic,
        numeric,
        max_rel_error,
        worst,
    })
}

/// Maximum relative error between tape and finite-difference gradients.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_report(f, x, eps).map(|r| r.max_rel_error)
}

/// Gradient check result for one parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub index: usize,
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
    pub worst: usize,
}

/// Checks the gradient of the full training objective with respect to
/// every parameter tensor of `net` on one batch.
///
/// The masked prediction graph and the layer weights are taken from the
/// base point and held fixed, since the objective treats them as
/// constants. `fault` corrupts one backward rule on every analytic tape.
pub fn check_objective(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    gcr: Option<&GcrConfig>,
    eps: f64,
    fault: Option<OpKind>,
) -> Result<Vec<TensorCheck>> {
    let mut tape = Tape::new();
    let params = net.bind_constant(&mut tape);
    let base = objective(&mut tape, net, &params, batch, labels, gcr, None)?;
    let frozen = base.reference;

    let mut out = Vec::with_capacity(net.params().len());
    for (k, p) in net.params().iter().enumerate() {
        let f = |tape: &mut Tape, x: Var| -> Result<Var> {
            if let Some(kind) = fault {
                tape.corrupt_rule(kind);
            }
            let vars: Vec<Var> = net
                .params()
                .iter()
                .enumerate()
                .map(|(j, q)| if j == k { x } else { tape.constant(q.clone()) })
                .collect();
            Ok(objective(tape, net, &vars, batch, labels, gcr, frozen.as_ref())?.total)
        };
        let r = gradient_report(f, p, eps)?;
        out.push(TensorCheck {
            index: k,
            shape: p.shape().to_vec(),
            max_rel_error: r.max_rel_error,
            worst: r.worst,
        });
    }
    Ok(out)
}
