//! Central finite-difference checks of [`Graph`] gradients.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared on an absolute scale.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

/// `|a − n| / max(|a|, |n|, SCALE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences of the same forward pass, for every entry of every parameter.
pub fn check_gradients<F>(params: Vec<Tensor>, f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradients_with_step(params, f, DEFAULT_STEP)
}

pub fn check_gradients_with_step<F>(mut params: Vec<Tensor>, mut f: F, h: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor], f: &mut F| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (mut g, vars, out) = eval(&params, &mut f)?;
    g.backward(out);
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| g.grad_or_zeros(*v)).collect();

    let mut report = GradCheck { max_relative_error: 0.0, max_abs_error: 0.0, entries: 0 };
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + h;
            let (g, _, out) = eval(&params, &mut f)?;
            let plus = g.value(out).data()[0];
            params[p].data_mut()[i] = orig - h;
            let (g, _, out) = eval(&params, &mut f)?;
            let minus = g.value(out).data()[0];
            params[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p][i];
            report.max_relative_error = report.max_relative_error.max(relative_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.entries += 1;
        }
    }
    Ok(report)
}
