use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::net::{BlockCache, HyperNet, HyperParams};
use crate::edit_math::{
    build_layer_problems, frobenius_inner, scale_columns, solve_all, spread_linear_decay_stack, spread_orthogonal,
    spread_orthogonal_backward, token_coefficients, Predecessor, ResidualStack,
};
use crate::error::{EditError, Result};
use crate::model::{supervised_loss, HookRecord, Instance, Model, Reduction};

/// How per-token coefficients are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficients {
    /// `cᵢ = −η Σⱼ Hⱼᵢ H̃ⱼᵢ`
    #[default]
    Token,
    /// `cᵢ = −η`
    Constant,
}

/// How per-layer residuals are combined across layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spread {
    /// Adjacent-layer Gram-Schmidt.
    #[default]
    Orthogonal,
    /// Each layer applies its own residual unchanged, with no cross-layer
    /// decorrelation.
    Uniform,
    /// Layer at position `l` of `T` is divided by `T − l + 1`.
    LinearDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResidualOptions {
    pub coefficients: Coefficients,
    pub spread: Spread,
    pub predecessor: Predecessor,
}

/// Batch-summed gradient of the supervised loss w.r.t. one editable matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSignal {
    pub layer: usize,
    pub g_w: DMatrix<f64>,
}

/// `g_w` for every editable layer; unrelated instances must carry the
/// pre-edit model's own outputs as targets.
pub fn accumulate_gradient_signal(
    model: &Model,
    edit: &[Instance],
    equivalent: &[Instance],
    unrelated: &[Instance],
) -> Result<Vec<GradientSignal>> {
    let sl = supervised_loss(model, edit, equivalent, unrelated, Reduction::Sum)?;
    Ok(model
        .editable_layers()
        .iter()
        .zip(sl.editable_grads)
        .map(|(&layer, g_w)| GradientSignal { layer, g_w })
        .collect())
}

pub(crate) struct LayerForward {
    g_t: DMatrix<f64>,
    coef: DVector<f64>,
    caches: Vec<BlockCache>,
}

/// Forward state kept for the backward pass.
pub(crate) struct Prediction {
    layers: Vec<LayerForward>,
    raw: ResidualStack,
    pub stack: ResidualStack,
    opts: ResidualOptions,
}

fn check_hooks(net: &HyperNet, hooks: &[HookRecord]) -> Result<()> {
    if hooks.is_empty() {
        return Err(EditError::Input("no hook records".into()));
    }
    let layers: Vec<usize> = hooks.iter().map(|h| h.layer).collect();
    if layers != net.layers {
        return Err(EditError::Input(format!(
            "hook layers {layers:?} differ from hypernetwork layers {:?}",
            net.layers
        )));
    }
    for h in hooks {
        net.check_io(&h.h, &h.g).map_err(|e| e.context(format!("layer {}", h.layer)))?;
    }
    Ok(())
}

fn spread(raw: &ResidualStack, opts: &ResidualOptions) -> Result<ResidualStack> {
    match opts.spread {
        Spread::Orthogonal => spread_orthogonal(raw, opts.predecessor),
        Spread::Uniform => Ok(raw.clone()),
        Spread::LinearDecay => spread_linear_decay_stack(raw),
    }
}

fn spread_backward(pred: &Prediction, d_spread: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    match pred.opts.spread {
        Spread::Orthogonal => {
            spread_orthogonal_backward(&pred.raw.residuals, &pred.stack.residuals, d_spread, pred.opts.predecessor)
        }
        Spread::Uniform => d_spread.to_vec(),
        Spread::LinearDecay => {
            let t = d_spread.len();
            d_spread.iter().enumerate().map(|(i, d)| d / (t - i) as f64).collect()
        }
    }
}

pub(crate) fn predict(net: &HyperNet, hooks: &[HookRecord], opts: &ResidualOptions) -> Result<Prediction> {
    check_hooks(net, hooks)?;
    let mut layers = Vec::with_capacity(hooks.len());
    let mut residuals = Vec::with_capacity(hooks.len());
    let mut etas = Vec::with_capacity(hooks.len());
    for (slot, hook) in hooks.iter().enumerate() {
        let (h_t, g_t, caches) = net.forward_cached(slot, &hook.h, &hook.g);
        let eta = net.eta(slot);
        let coef = match opts.coefficients {
            Coefficients::Token => token_coefficients(&hook.h, &h_t, eta)?,
            Coefficients::Constant => DVector::from_element(hook.h.ncols(), -eta),
        };
        residuals.push(scale_columns(&g_t, &coef));
        etas.push(eta);
        layers.push(LayerForward { g_t, coef, caches });
    }
    let raw = ResidualStack::new(net.layers.clone(), residuals, etas)
        .map_err(|e| e.context("predicted residuals"))?;
    let stack = spread(&raw, opts)?;
    Ok(Prediction { layers, raw, stack, opts: *opts })
}

/// Refines each layer's hooks, forms the per-token residuals with that
/// layer's `η`, and spreads them across layers. The same function produces
/// the residuals used at edit time.
pub fn predicted_residual(net: &HyperNet, hooks: &[HookRecord], opts: &ResidualOptions) -> Result<ResidualStack> {
    Ok(predict(net, hooks, opts)?.stack)
}

/// Pre-spread residuals, for diagnostics.
pub fn raw_residual(net: &HyperNet, hooks: &[HookRecord], opts: &ResidualOptions) -> Result<ResidualStack> {
    Ok(predict(net, hooks, opts)?.raw)
}

/// Ridge updates for every layer from a spread stack.
pub fn layer_deltas(net: &HyperNet, hooks: &[HookRecord], stack: &ResidualStack) -> Result<Vec<DMatrix<f64>>> {
    solve_all(&build_layer_problems(hooks, stack, &net.log_lambdas())?)
}

/// Applies per-layer updates to a copy of `model`.
pub fn apply_deltas(model: &Model, layers: &[usize], deltas: &[DMatrix<f64>]) -> Result<Model> {
    let mut out = model.clone();
    for (&l, d) in layers.iter().zip(deltas) {
        out.apply_delta_in_place(l, d)?;
    }
    Ok(out)
}

/// `Σ_l Tr(H (HᵀH + e^λ I)⁻¹ R̂ᵀ g_w)` and its gradients w.r.t. each spread
/// residual and each `log λ`.
pub(crate) fn trace_and_grads(
    net: &HyperNet,
    hooks: &[HookRecord],
    stack: &ResidualStack,
    g_w: &[DMatrix<f64>],
) -> Result<(Vec<f64>, Vec<DMatrix<f64>>, DMatrix<f64>)> {
    if g_w.len() != hooks.len() {
        return Err(EditError::Input(format!("{} gradient signals for {} layers", g_w.len(), hooks.len())));
    }
    let mut values = Vec::with_capacity(hooks.len());
    let mut d_r = Vec::with_capacity(hooks.len());
    let mut d_loglam = DMatrix::zeros(hooks.len(), 1);
    for (slot, ((hook, r), gw)) in hooks.iter().zip(&stack.residuals).zip(g_w).enumerate() {
        let h = &hook.h;
        if gw.shape() != (r.nrows(), h.nrows()) {
            return Err(EditError::Input(format!("gradient signal for layer {} has wrong shape", hook.layer)));
        }
        let lambda = net.lambda(slot);
        let mut gram = h.tr_mul(h);
        for i in 0..gram.nrows() {
            gram[(i, i)] += lambda;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| EditError::Numerical(format!("trace system for layer {} is singular", hook.layer)))?;
        // Q = g_w H M and Q M, with M = (HᵀH + λI)⁻¹ symmetric.
        let p = gw * h;
        let q = chol.solve(&p.transpose()).transpose();
        let qm = chol.solve(&q.transpose()).transpose();
        values.push(frobenius_inner(&q, r));
        d_loglam[slot] = -lambda * frobenius_inner(&qm, r);
        d_r.push(q);
    }
    Ok((values, d_r, d_loglam))
}

/// Backpropagates gradients on the spread residuals into the network and
/// `log η`.
pub(crate) fn residual_backward(net: &HyperNet, hooks: &[HookRecord], pred: &Prediction, d_spread: &[DMatrix<f64>]) -> HyperParams {
    let mut grads = net.params.zeros_like();
    let d_raw = spread_backward(pred, d_spread);
    for (slot, ((hook, lf), dr)) in hooks.iter().zip(&pred.layers).zip(&d_raw).enumerate() {
        let dg_t = scale_columns(dr, &lf.coef);
        let dc: Vec<f64> = lf.g_t.column_iter().zip(dr.column_iter()).map(|(g, d)| g.dot(&d)).collect();
        grads.log_eta[slot] = dc.iter().zip(lf.coef.iter()).map(|(d, c)| d * c).sum();
        let mut dh_t = DMatrix::zeros(hook.h.nrows(), hook.h.ncols());
        if pred.opts.coefficients == Coefficients::Token {
            let eta = net.eta(slot);
            for (i, mut col) in dh_t.column_iter_mut().enumerate() {
                col.axpy(-eta * dc[i], &hook.h.column(i), 0.0);
            }
        }
        net.backward(slot, &dh_t, &dg_t, &lf.caches, &mut grads);
    }
    grads
}

/// Trace term alone with `g_w` held fixed, and its parameter gradients.
pub fn trace_term(
    net: &HyperNet,
    hooks: &[HookRecord],
    g_w: &[DMatrix<f64>],
    opts: &ResidualOptions,
) -> Result<(f64, HyperParams)> {
    let pred = predict(net, hooks, opts)?;
    let (values, d_r, d_loglam) = trace_and_grads(net, hooks, &pred.stack, g_w)?;
    let mut grads = residual_backward(net, hooks, &pred, &d_r);
    grads.log_lambda = d_loglam;
    Ok((values.iter().sum(), grads))
}

/// Instances for one training or evaluation batch.
#[derive(Debug, Clone)]
pub struct HorseBatch {
    pub hooks: Vec<HookRecord>,
    pub edit: Vec<Instance>,
    pub equivalents: Vec<Instance>,
    /// Labelled with the pre-edit model's greedy outputs.
    pub unrelated: Vec<Instance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LossOptions {
    pub residual: ResidualOptions,
    /// Build the trace term from residuals with constant coefficients while
    /// the update itself keeps the per-token ones.
    #[serde(default)]
    pub trace_without_ci: bool,
}

#[derive(Debug, Clone)]
pub struct HorseLoss {
    /// Summed cross-entropy of the edited model over the batch.
    pub ce: f64,
    pub trace: f64,
    pub total: f64,
    pub per_layer_trace: Vec<f64>,
    /// Gradient of the edited model's loss w.r.t. each editable matrix.
    pub g_w: Vec<DMatrix<f64>>,
    /// Parameter gradients through the trace term with `g_w` held fixed.
    /// Because the trace is linear in the update, this equals the gradient
    /// of `ce` w.r.t. the parameters.
    pub grads: HyperParams,
}

/// Cross-entropy of the model edited by the network's update, plus the trace
/// term pairing the predicted residuals with `g_w` taken at that edited model.
pub fn loss_horse(model: &Model, net: &HyperNet, batch: &HorseBatch, opts: &LossOptions) -> Result<HorseLoss> {
    let pred = predict(net, &batch.hooks, &opts.residual)?;
    let deltas = layer_deltas(net, &batch.hooks, &pred.stack)?;
    let edited = apply_deltas(model, &net.layers, &deltas)?;
    let sl = supervised_loss(&edited, &batch.edit, &batch.equivalents, &batch.unrelated, Reduction::Sum)?;
    let trace_pred;
    let pred_t = if opts.trace_without_ci {
        let o = ResidualOptions { coefficients: super::Coefficients::Constant, ..opts.residual };
        trace_pred = predict(net, &batch.hooks, &o)?;
        &trace_pred
    } else {
        &pred
    };
    let (per_layer_trace, d_r, d_loglam) = trace_and_grads(net, &batch.hooks, &pred_t.stack, &sl.editable_grads)?;
    let mut grads = residual_backward(net, &batch.hooks, pred_t, &d_r);
    grads.log_lambda = d_loglam;
    let trace: f64 = per_layer_trace.iter().sum();
    Ok(HorseLoss {
        ce: sl.loss,
        trace,
        total: sl.loss + trace,
        per_layer_trace,
        g_w: sl.editable_grads,
        grads,
    })
}
