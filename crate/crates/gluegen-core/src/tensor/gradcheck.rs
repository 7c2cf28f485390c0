//! Central-difference gradient oracle.
//!
//! `finite_diff_grad` differentiates an arbitrary scalar-valued function of a
//! parameter store by perturbing one element at a time. It is the independent
//! reference the analytic backward pass is validated against; run it in `f64`
//! with the default step for trustworthy digits.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::array::Array;
use super::element::Element;
use super::store::ParameterStore;

/// Default central-difference step for 64-bit checks.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Numerically differentiate `f` with respect to every element of every
/// tensor in `store`, using central differences with step `h`.
///
/// Returns per-parameter gradient arrays keyed by name. The store itself is
/// not mutated; `f` is invoked on perturbed clones.
pub fn finite_diff_grad<E: Element>(
    mut f: impl FnMut(&ParameterStore<E>) -> Result<E>,
    store: &ParameterStore<E>,
    h: f64,
) -> Result<BTreeMap<String, Array<E>>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work = store.clone();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let step = E::from_f64(h);
    let inv_two_h = 1.0 / (2.0 * h);

    let mut out = BTreeMap::new();
    for name in names {
        let numel = work.get(&name)?.value().numel();
        let mut grad = Array::zeros(work.get(&name)?.value().shape().clone());
        for idx in 0..numel {
            let original = work.get(&name)?.value().as_slice()[idx];
            work.get_mut(&name)?.value_mut().as_mut_slice()[idx] = original + step;
            let plus = f(&work)?.to_f64();
            work.get_mut(&name)?.value_mut().as_mut_slice()[idx] = original - step;
            let minus = f(&work)?.to_f64();
            work.get_mut(&name)?.value_mut().as_mut_slice()[idx] = original;
            grad.as_mut_slice()[idx] = E::from_f64((plus - minus) * inv_two_h);
        }
        out.insert(name, grad);
    }
    Ok(out)
}
