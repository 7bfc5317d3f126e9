//! Central-difference gradient oracle.
//!
//! The objective is rebuilt from scratch on a fresh tape for every probe, so
//! the numeric side never shares state with the reverse sweep it checks.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute difference instead.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            tol: 1e-4,
            floor: 1e-4,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckOptions {
            tol,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct LeafReport {
    pub max_rel_err: f64,
    /// Coordinate achieving `max_rel_err`.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, leaves: &[Tensor], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = leaves
        .iter()
        .map(|t| tape.leaf(t.clone(), requires_grad))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(x+eps) − f(x−eps)) / 2eps` for every coordinate of every leaf.
pub fn grad_check<F>(f: F, leaves: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.eps
        )));
    }
    let (tape, vars, out) = evaluate(&f, leaves, true)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaves[li].shape()));
        let mut report = LeafReport {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in 0..leaves[li].len() {
            let orig = leaves[li].data()[idx];
            let probe = |x: f64, work: &mut Vec<Tensor>| -> Result<f64> {
                work[li].data_mut()[idx] = x;
                let res = evaluate(&f, work, false);
                let value = match res {
                    Ok((tape, _, out)) => tape.value(out).data()[0],
                    Err(Error::NonFinite { .. }) => f64::NAN,
                    Err(e) => return Err(e),
                };
                if !value.is_finite() {
                    return Err(Error::Evaluation {
                        leaf: li,
                        index: idx,
                        value: x,
                    });
                }
                Ok(value)
            };
            let plus = probe(orig + opts.eps, &mut work)?;
            let minus = probe(orig - opts.eps, &mut work)?;
            work[li].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric, opts.floor);
            if err > report.max_rel_err || idx == 0 {
                report = LeafReport {
                    max_rel_err: err,
                    worst_index: idx,
                    analytic: a,
                    numeric,
                };
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        leaves: reports,
        tol: opts.tol,
    })
}
