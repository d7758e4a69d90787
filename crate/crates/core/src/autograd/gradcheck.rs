//! Central-difference gradient verification.

use crate::error::{Error, Result};

use super::graph::{Graph, ValId};
use super::tensor::Tensor;

const REL_EPS: f64 = 1e-12;

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, ValId) -> Result<ValId>,
{
    let mut g = Graph::new();
    let xid = g.leaf(&x.clone().with_requires_grad(false));
    let out = f(&mut g, xid)?;
    let t = g.value(out);
    if !t.is_scalar() {
        return Err(Error::contract(format!(
            "finite_diff_check requires a scalar-valued f, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Compares the analytic gradient of `f` at `x` against central differences
/// with step `h`, returning the maximum relative error
/// maxᵢ |analyticᵢ − (f(x+heᵢ) − f(x−heᵢ))/2h| / (|analyticᵢ| + 1e−12).
///
/// `f` must be deterministic; two evaluations at `x` that differ are a
/// contract error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, ValId) -> Result<ValId>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("finite_diff_check needs h > 0, got {h}")));
    }
    let v0 = eval_scalar(&f, x)?;
    let v1 = eval_scalar(&f, x)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::contract(format!(
            "f is not deterministic: {v0:?} vs {v1:?} at the same point"
        )));
    }

    let analytic = {
        let mut g = Graph::new();
        let xid = g.leaf(&x.clone().with_requires_grad(true));
        let out = f(&mut g, xid)?;
        if !g.value(out).is_scalar() {
            return Err(Error::contract(
                "finite_diff_check requires a scalar-valued f".to_string(),
            ));
        }
        g.backward(out)?;
        g.grad(xid)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()])
    };

    let mut probe = x.clone().with_requires_grad(false);
    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + REL_EPS);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
