use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::loss::{apply_deltas, layer_deltas, loss_horse, predicted_residual, trace_term, HorseBatch, LossOptions};
use super::net::HyperNet;
use crate::error::Result;
use crate::model::{supervised_loss, Model, Reduction};

/// Worst finite-difference disagreement for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries_checked: usize,
    /// Against the trace term with `g_w` held fixed.
    pub max_rel_trace: f64,
    /// Against the edited model's cross-entropy.
    pub max_rel_ce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_trace.max(t.max_rel_ce)).fold(0.0, f64::max)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn edited_ce(model: &Model, net: &HyperNet, batch: &HorseBatch, opts: &LossOptions) -> Result<f64> {
    let stack = predicted_residual(net, &batch.hooks, &opts.residual)?;
    let deltas = layer_deltas(net, &batch.hooks, &stack)?;
    let edited = apply_deltas(model, &net.layers, &deltas)?;
    Ok(supervised_loss(&edited, &batch.edit, &batch.equivalents, &batch.unrelated, Reduction::Sum)?.loss)
}

/// Central differences over up to `max_entries` evenly spaced entries of each
/// parameter tensor (all entries when `None`).
///
/// The analytic gradient is checked twice: against the trace term with the
/// gradient signal frozen, and against the edited model's cross-entropy,
/// which it must also equal when the trace is built with the update's own
/// coefficients.
pub fn grad_check(
    model: &Model,
    net: &HyperNet,
    batch: &HorseBatch,
    opts: &LossOptions,
    step: f64,
    max_entries: Option<usize>,
) -> Result<GradCheckReport> {
    let analytic = loss_horse(model, net, batch, opts)?;
    let check_ce = !opts.trace_without_ci;
    let names: Vec<(String, usize)> = net.params.tensors().iter().map(|(n, m)| (n.clone(), m.len())).collect();
    let mut tensors = Vec::new();
    for (ti, (name, len)) in names.iter().enumerate() {
        let stride = max_entries.map_or(1, |m| len.div_ceil(m.max(1)).max(1));
        let mut report = TensorCheck { name: name.clone(), entries_checked: 0, max_rel_trace: 0.0, max_rel_ce: 0.0 };
        let a_t: &DMatrix<f64> = analytic.grads.tensors()[ti].1;
        for k in (0..*len).step_by(stride) {
            let shifted = |h: f64| {
                let mut n = net.clone();
                n.params.tensors_mut()[ti].1.as_mut_slice()[k] += h;
                n
            };
            let (plus, minus) = (shifted(step), shifted(-step));
            let trace_res = if opts.trace_without_ci {
                super::ResidualOptions { coefficients: super::Coefficients::Constant, ..opts.residual }
            } else {
                opts.residual
            };
            let tp = trace_term(&plus, &batch.hooks, &analytic.g_w, &trace_res)?.0;
            let tm = trace_term(&minus, &batch.hooks, &analytic.g_w, &trace_res)?.0;
            let a = a_t.as_slice()[k];
            report.max_rel_trace = report.max_rel_trace.max(rel(a, (tp - tm) / (2.0 * step)));
            if check_ce {
                let cp = edited_ce(model, &plus, batch, opts)?;
                let cm = edited_ce(model, &minus, batch, opts)?;
                report.max_rel_ce = report.max_rel_ce.max(rel(a, (cp - cm) / (2.0 * step)));
            }
            report.entries_checked += 1;
        }
        tensors.push(report);
    }
    Ok(GradCheckReport { step, tensors })
}
