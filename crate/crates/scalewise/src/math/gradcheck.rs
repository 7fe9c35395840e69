//! Central finite-difference gradient oracle.
//!
//! The oracle never touches the tape's backward pass: it re-evaluates a
//! forward-only scalar function under elementwise perturbations and compares
//! against whatever analytic gradients the caller accumulated on the
//! parameter store. That keeps the two routes independent.

use super::tape::{ParamStore, EPS};
use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// max over parameter elements of |analytic - numeric| / max(|analytic|, |numeric|, eps)
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub elements_checked: usize,
}

/// Compare analytic gradients (already on `params`' gradient buffers) against
/// central finite differences of `f` with step `h`.
///
/// `f` must be a deterministic scalar function of the parameter values; two
/// evaluations at the base point are compared to enforce this.
pub fn finite_diff_check(
    params: &mut ParamStore,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<FdReport> {
    if h <= 0.0 {
        return Err(Error::Usage(format!("finite_diff_check: h = {h} must be > 0")));
    }
    let base_a = f(params)?;
    let base_b = f(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::Oracle(format!(
            "f is not deterministic: {base_a:?} vs {base_b:?} at the same point"
        )));
    }

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        elements_checked: 0,
    };

    for pid in params.ids().collect::<Vec<_>>() {
        let numel = params.value(pid).numel();
        for idx in 0..numel {
            let orig = params.value(pid).data()[idx];

            params.value_mut(pid).data_mut()[idx] = orig + h;
            let plus = f(params)?;
            params.value_mut(pid).data_mut()[idx] = orig - h;
            let minus = f(params)?;
            params.value_mut(pid).data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = params
                .value(pid)
                .grad()
                .map(|g| g[idx])
                .unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(EPS);
            report.elements_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params.name(pid).to_string();
                report.worst_index = idx;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::tape::Tape;
    use crate::math::tensor::Tensor;

    #[test]
    fn square_function_matches_exactly() {
        // f(x) = x^2 at x = 3: central differences of a quadratic are exact
        // up to rounding.
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));

        let mut tape = Tape::<f64>::new(true);
        let xv = tape.param(&store, x);
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.grads_into_store(&mut store).unwrap();

        let report = finite_diff_check(&mut store, 1e-5, |p| {
            let v = p.value(x).item()?;
            Ok(v * v)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn constant_function_reports_zero() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        store.value_mut(x).enable_grad();

        let report = finite_diff_check(&mut store, 1e-5, |_| Ok(42.0)).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.elements_checked, 3);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.0));
        let mut calls = 0u32;
        let err = finite_diff_check(&mut store, 1e-5, |_| {
            calls += 1;
            Ok(calls as f64)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.0));
        assert!(finite_diff_check(&mut store, 0.0, |_| Ok(0.0)).is_err());
    }
}
