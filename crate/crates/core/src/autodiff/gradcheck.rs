//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all inputs and entries.
    pub max_rel_err: f64,
    /// Largest relative error per input tensor.
    pub per_input: Vec<f64>,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences. `f` must build its result from the supplied vars only.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::shape("grad_check output", g.shape(out), &[1]));
        }
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(inputs)?;
    let grads = g.backward(out)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut evaluations = 1;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        let mut worst: f64 = 0.0;
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let (gp, _, op) = eval(&probe)?;
            let fp = gp.value(op).item();
            probe[k].data_mut()[i] = orig - step;
            let (gm, _, om) = eval(&probe)?;
            let fm = gm.value(om).item();
            probe[k].data_mut()[i] = orig;
            evaluations += 2;
            let numeric = (fp - fm) / (2.0 * step);
            let err = relative_error(analytic.data()[i], numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        per_input,
        evaluations,
    })
}
