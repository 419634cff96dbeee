//! Central finite-difference verification of tape gradients.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn for_precision<T: Scalar>() -> Self {
        let tol = if T::BYTES == 4 { 1e-3 } else { 1e-5 };
        Self {
            step: T::FD_STEP,
            tol,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCoordinate {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tol: f64,
    pub worst: Option<WorstCoordinate>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn ensure(&self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(Error::Numeric(self.to_string()))
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "grad check {}: max rel error {:.3e} (tol {:.1e}) over {} coordinates",
            if self.passed() { "passed" } else { "FAILED" },
            self.max_rel_error,
            self.tol,
            self.checked
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst at param {} index {}: analytic {:.6e} vs numeric {:.6e}",
                w.param, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

fn evaluate<T: Scalar, F>(f: &F, params: &[Tensor<T>], grad: bool) -> Result<(T, Tape<T>, Vec<Var>)>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), grad)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract("grad_check function must return a scalar".into()));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value is not finite: {v}")));
    }
    if grad {
        tape.backward(out)?;
    }
    Ok((v, tape, vars))
}

/// Compares tape gradients of the scalar function `f` against central
/// differences. The error per coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<T, F>(params: &[Tensor<T>], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let (_, tape, vars) = evaluate(&f, params, true)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| tape.grad(v)).collect();
    drop(tape);

    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        tol: opts.tol,
        worst: None,
    };
    let mut work = params.to_vec();
    let h = T::lit(opts.step);
    for p in 0..params.len() {
        let n = params[p].numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(limit) = opts.max_coords_per_param {
            if limit < n {
                rng.shuffle(&mut coords);
                coords.truncate(limit);
                coords.sort_unstable();
            }
        }
        for &i in &coords {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let (plus, _, _) = evaluate(&f, &work, false)?;
            work[p].data_mut()[i] = orig - h;
            let (minus, _, _) = evaluate(&f, &work, false)?;
            work[p].data_mut()[i] = orig;
            // divide by the step actually realised in this precision
            let realised = (orig + h).as_f64() - (orig - h).as_f64();
            let numeric = (plus.as_f64() - minus.as_f64()) / realised;
            let a = analytic[p].data()[i].as_f64();
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some(WorstCoordinate {
                        param: p,
                        index: i,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    Ok(report)
}
