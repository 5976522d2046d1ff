//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// Per-parameter outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub param: usize,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_err >= self.tol)
    }
}

/// Options for [`GradCheck::run`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`. Keeps gradients
    /// that are zero up to rounding from producing spurious relative errors.
    pub floor: f64,
}

impl GradCheck {
    pub fn new(h: f64, tol: f64) -> Self {
        Self { h, tol, floor: 1e-8 }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    /// Compare reverse-mode gradients of `f` against central differences.
    ///
    /// `f` receives a fresh graph and one leaf per parameter and must return a
    /// scalar loss. It is evaluated twice at the base point first; a bitwise
    /// mismatch is reported as a harness error, since finite differences of a
    /// non-deterministic function are meaningless.
    pub fn run<F>(&self, params: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        if !(self.h > 0.0) {
            return Err(Error::Harness(format!("step must be positive, got {}", self.h)));
        }
        let eval = |values: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
            let loss = f(&mut g, &vars)?;
            Ok(g.value(loss).data()[0])
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let base = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        let again = eval(params)?;
        if base.to_bits() != again.to_bits() {
            return Err(Error::Harness(format!(
                "function is not deterministic: {base} vs {again}"
            )));
        }

        let mut report = Vec::with_capacity(params.len());
        let mut work: Vec<Tensor<f64>> = params.to_vec();
        for (pi, var) in vars.iter().enumerate() {
            let analytic = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(params[pi].shape().to_vec()));
            let mut check = ParamCheck {
                param: pi,
                max_rel_err: 0.0,
                worst_element: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for e in 0..params[pi].len() {
                let orig = params[pi].data()[e];
                work[pi].data_mut()[e] = orig + self.h;
                let plus = eval(&work)?;
                work[pi].data_mut()[e] = orig - self.h;
                let minus = eval(&work)?;
                work[pi].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * self.h);
                let a = analytic.data()[e];
                let denom = a.abs().max(numeric.abs()).max(self.floor);
                let rel = (a - numeric).abs() / denom;
                if e == 0 || rel > check.max_rel_err {
                    check.max_rel_err = rel;
                    check.worst_element = e;
                    check.analytic = a;
                    check.numeric = numeric;
                }
            }
            report.push(check);
        }
        let max_rel_err = report.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
        Ok(GradCheckReport {
            params: report,
            tol: self.tol,
            max_rel_err,
            passed: max_rel_err < self.tol,
        })
    }
}

/// Convenience wrapper with the default denominator floor.
pub fn finite_diff_check<F>(params: &[Tensor<f64>], f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    GradCheck::new(h, tol).run(params, f)
}
