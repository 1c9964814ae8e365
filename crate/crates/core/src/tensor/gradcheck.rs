//! Central-difference gradient verification.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Multiplier applied to the analytic gradient before comparison.
    /// Anything other than 1.0 is a deliberate fault for exercising the checker.
    pub analytic_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub elements: usize,
    /// Flat index of the worst element.
    pub worst_index: usize,
    /// First element whose probe or analytic gradient was not finite.
    pub non_finite_at: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| {
                if p.non_finite_at.is_some() {
                    f64::INFINITY
                } else {
                    p.max_rel_error
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn elements_checked(&self) -> usize {
        self.params.iter().map(|p| p.elements).sum()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            match p.non_finite_at {
                Some(i) => writeln!(f, "  {:<24} non-finite at element {i}", p.name)?,
                None => writeln!(
                    f,
                    "  {:<24} {:>6} elems  max rel err {:.3e} (at {})",
                    p.name, p.elements, p.max_rel_error, p.worst_index
                )?,
            }
        }
        write!(
            f,
            "  {} elements, max rel err {:.3e}, tol {:.0e}: {}",
            self.elements_checked(),
            self.max_rel_error(),
            self.tol,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences, element by element, for every named parameter.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &leaves)?;
        let grads = tape.backward(loss)?;
        leaves.iter().map(|&l| grads.get(l)).collect()
    };

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &leaves)?.item())
    };

    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            elements: work[pi].numel(),
            worst_index: 0,
            non_finite_at: None,
        };
        for i in 0..work[pi].numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + cfg.eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - cfg.eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[pi].data()[i] * cfg.analytic_scale;
            if !numeric.is_finite() || !a.is_finite() {
                check.non_finite_at = Some(i);
                break;
            }
            let err = relative_error(a, numeric);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
            }
        }
        checks.push(check);
    }
    let pass = checks
        .iter()
        .all(|c| c.non_finite_at.is_none() && c.max_rel_error <= cfg.tol);
    Ok(GradCheckReport {
        params: checks,
        tol: cfg.tol,
        pass,
    })
}
