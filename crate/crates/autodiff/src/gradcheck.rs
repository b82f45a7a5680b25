//! Central finite-difference oracle.
//!
//! Only forward evaluations are used here, so the check stays independent of
//! the backward implementation it validates.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Relative error with a small absolute floor in the denominator so that
/// gradients that are zero up to rounding do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central differences of `f` with respect to every parameter in `store`.
pub fn numeric_param_grads<F>(store: &ParamStore, step: f64, mut f: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).len();
        let mut g = Tensor::zeros(store.get(id).shape());
        for i in 0..n {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Central differences of `f` with respect to a free input tensor.
pub fn numeric_input_grad<F>(x: &Tensor, step: f64, mut f: F) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut work = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + step;
        let plus = f(&work)?;
        work.data_mut()[i] = orig - step;
        let minus = f(&work)?;
        work.data_mut()[i] = orig;
        g.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(g)
}

/// Largest elementwise relative error between two gradient sets.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
