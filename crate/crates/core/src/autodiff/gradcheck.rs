//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

use super::params::ParamStore;
use super::tape::{Tape, TracedScalar};

/// Default step for central differences, scaled per-component by magnitude.
pub const DEFAULT_FD_EPS: f64 = 1e-6;
/// Default pass threshold on the max relative error.
pub const DEFAULT_GRADCHECK_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckEntry<T: Scalar> {
    /// `name[index]` of the checked component.
    pub label: String,
    pub analytic: T,
    pub numeric: T,
    pub rel_err: T,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport<T: Scalar> {
    pub entries: Vec<GradCheckEntry<T>>,
    pub max_rel_err: T,
    pub tol: T,
    pub pass: bool,
}

impl<T: Scalar> GradCheckReport<T> {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("component analytic numeric rel_err\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{} {:?} {:?} {:?}\n",
                e.label,
                to_f64(e.analytic),
                to_f64(e.numeric),
                to_f64(e.rel_err)
            ));
        }
        s.push_str(&format!(
            "max_rel_err={:?} tol={:?} result={}\n",
            to_f64(self.max_rel_err),
            to_f64(self.tol),
            if self.pass { "PASS" } else { "FAIL" }
        ));
        s
    }
}

/// Compares the taped gradient of `build`'s loss against central finite
/// differences for every trainable component. `build` must construct the
/// loss from the store it is handed (it runs once recording, then twice
/// per component on no-grad tapes with perturbed parameters).
pub fn grad_check<T, F>(
    build: F,
    params: &mut ParamStore<T>,
    eps: T,
    tol: T,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&Tape<T>, &ParamStore<T>) -> Result<TracedScalar<T>>,
{
    let n = params.trainable_len();
    let indices: Vec<usize> = (0..n).collect();
    grad_check_indices(build, params, &indices, eps, tol)
}

/// [`grad_check`] restricted to a subset of flattened component indices
/// (useful when the parameter vector is large).
pub fn grad_check_indices<T, F>(
    build: F,
    params: &mut ParamStore<T>,
    indices: &[usize],
    eps: T,
    tol: T,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&Tape<T>, &ParamStore<T>) -> Result<TracedScalar<T>>,
{
    if eps <= T::zero() || !eps.is_finite() {
        return Err(Error::Usage(format!("fd step must be positive, got {eps}")));
    }
    let tape = Tape::new();
    let loss = build(&tape, params)?;
    tape.validate_finite()?;
    tape.backward(&loss, params)?;
    let analytic = params.flatten_trainable_grads();
    let labels = params.trainable_labels();
    let theta = params.flatten_trainable();
    for &i in indices {
        if i >= theta.len() {
            return Err(Error::Usage(format!(
                "component index {i} out of range for {} trainable values",
                theta.len()
            )));
        }
    }

    let mut entries = Vec::with_capacity(indices.len());
    let mut max_rel = T::zero();
    let mut work = theta.clone();
    for &i in indices {
        let h = eps * T::one().max(theta[i].abs());
        work[i] = theta[i] + h;
        params.unflatten_trainable(&work)?;
        let lp = eval_no_grad(&build, params)?;
        work[i] = theta[i] - h;
        params.unflatten_trainable(&work)?;
        let lm = eval_no_grad(&build, params)?;
        work[i] = theta[i];
        let numeric = (lp - lm) / (lit::<T>(2.0) * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(lit(1e-12));
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
        entries.push(GradCheckEntry {
            label: labels[i].clone(),
            analytic: analytic[i],
            numeric,
            rel_err: rel,
        });
    }
    // Restore the original parameters exactly.
    params.unflatten_trainable(&theta)?;
    // Leave the analytic gradient in the store for callers that inspect it.
    Ok(GradCheckReport {
        entries,
        max_rel_err: max_rel,
        tol,
        pass: max_rel < tol,
    })
}

fn eval_no_grad<T, F>(build: &F, params: &ParamStore<T>) -> Result<T>
where
    T: Scalar,
    F: Fn(&Tape<T>, &ParamStore<T>) -> Result<TracedScalar<T>>,
{
    let tape = Tape::no_grad();
    let loss = build(&tape, params)?;
    let v = loss.value();
    if !v.is_finite() {
        return Err(Error::NonFinite(
            "loss is non-finite at a finite-difference probe".into(),
        ));
    }
    Ok(v)
}
