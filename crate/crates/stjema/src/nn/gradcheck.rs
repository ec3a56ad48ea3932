//! Finite-difference verification of analytic gradients.
//!
//! Used by the test suites to certify every loss path end-to-end: the
//! caller supplies a pure function from a [`ParamStore`] to a scalar
//! loss, plus the analytic gradients produced by the tape, and gets back
//! the worst relative error over all checked coordinates.

use std::collections::BTreeMap;

use ndarray::Array2;
use thiserror::Error;

use super::params::ParamStore;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("forward pass returned a non-finite value while perturbing {name:?}[{row},{col}]")]
    NonFiniteForward { name: String, row: usize, col: usize },
    #[error("no gradient provided for parameter {0:?}")]
    MissingGradient(String),
    #[error("parameter store error: {0}")]
    Param(#[from] super::params::ParamError),
}

/// Report from a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(1, |numeric|)` over all
    /// coordinates checked.
    pub max_rel_err: f64,
    /// Name and coordinate where the worst error occurred.
    pub worst: Option<(String, usize, usize)>,
    /// Total coordinates checked.
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences with
/// step `h`, for every coordinate of every parameter named in `names`.
///
/// `loss` must be deterministic: it is invoked twice per coordinate on
/// perturbed copies of the store.
pub fn check_gradients(
    store: &ParamStore,
    names: &[String],
    analytic: &BTreeMap<String, Array2<f64>>,
    loss: &mut dyn FnMut(&ParamStore) -> f64,
    h: f64,
) -> Result<GradCheckReport, GradCheckError> {
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    let mut work = store.clone();
    for name in names {
        let base = store.get(name)?.clone();
        let grad = analytic
            .get(name)
            .ok_or_else(|| GradCheckError::MissingGradient(name.clone()))?;
        for idx in 0..base.len() {
            let (r, c) = (idx / base.ncols(), idx % base.ncols());
            let mut plus = base.clone();
            plus[(r, c)] += h;
            work.set(name, plus)?;
            let lp = loss(&work);
            let mut minus = base.clone();
            minus[(r, c)] -= h;
            work.set(name, minus)?;
            let lm = loss(&work);
            work.set(name, base.clone())?;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(GradCheckError::NonFiniteForward {
                    name: name.clone(),
                    row: r,
                    col: c,
                });
            }
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (grad[(r, c)] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), r, c));
            }
        }
    }
    Ok(report)
}
