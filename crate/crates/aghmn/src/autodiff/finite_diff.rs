//! Central-difference gradient oracle.
//!
//! This is the independent check the analytic backward pass is verified
//! against; it never touches the graph machinery.

use crate::autodiff::params::{GradMap, ParamSet};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Central differences `(f(θ+εe) − f(θ−εe)) / 2ε` for every scalar parameter.
///
/// `f` must be deterministic (dropout disabled) for the differences to mean
/// anything.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamSet, eps: f64) -> Result<GradMap>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::contract(format!("finite difference step {eps} must be positive")));
    }
    let mut work = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    let mut grads = GradMap::new();
    for name in names {
        let numel = work.get(&name).expect("name from same set").numel();
        let mut grad = Tensor::zeros(params.get(&name).unwrap().shape());
        for i in 0..numel {
            let original = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = original + eps;
            let plus = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = original - eps;
            let minus = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = original;
            grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        grads.insert(name, grad);
    }
    Ok(grads)
}

/// Relative error with an absolute floor: `|a−b| / max(1, |a|, |b|)`.
///
/// The floor keeps finite-difference roundoff from blowing up comparisons of
/// near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Worst relative error across two gradient maps, with the offending entry.
pub fn max_rel_err(analytic: &GradMap, numeric: &GradMap) -> (f64, String) {
    let mut worst = 0.0;
    let mut worst_at = String::from("-");
    for (name, a) in analytic {
        let Some(n) = numeric.get(name) else { continue };
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let e = rel_err(av, nv);
            if e > worst {
                worst = e;
                worst_at = format!("{name}[{i}]");
            }
        }
    }
    (worst, worst_at)
}
