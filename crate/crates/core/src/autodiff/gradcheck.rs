//! Central finite-difference checks of [`Graph::backward`](super::Graph::backward).

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradReport {
    /// `max |analytic - numeric| / max(max |numeric|, max |analytic|, 1e-6)`
    /// taken per input tensor, then maximised over inputs.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradReport {
    pub fn merge(self, other: GradReport) -> GradReport {
        GradReport {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
        }
    }
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences with step `h`, for every tensor in `inputs`.
///
/// `build` receives one tracked leaf per input and must return a scalar node.
/// It is re-run for every perturbed entry, so it must be deterministic.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let root = build(&mut g, &vars)?;
        g.value(root).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let root = build(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut report = GradReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        if !analytic.is_finite() {
            return Err(Error::Contract(format!("non-finite gradient for input {k}")));
        }
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let numeric = Tensor::new(inputs[k].shape(), numeric)?;
        let abs = analytic.max_abs_diff(&numeric)?;
        let scale = numeric.max_abs().max(analytic.max_abs()).max(1e-6);
        report = report.merge(GradReport {
            max_rel_err: abs / scale,
            max_abs_err: abs,
        });
    }
    Ok(report)
}
