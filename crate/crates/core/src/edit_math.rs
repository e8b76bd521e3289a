//! Linear-algebra kernels for the weight update: the ridge solve, residual
//! constructions and the layer-spread strategies.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::model::{HookRecord, Instance, Model};

/// Threshold on the squared predecessor norm, per matrix entry, below which
/// the orthogonal projection is skipped.
pub const SPREAD_EPS: f64 = 1e-24;

/// A projected residual whose norm is at most this fraction of the input
/// norm is rounding noise and is set to exactly zero, so that the next layer
/// takes the skip path instead of projecting against noise.
pub const CANCEL_REL: f64 = 1e-12;

/// Frobenius inner product of two equally shaped matrices.
pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// `min ‖Δ H − R‖²_F + λ‖Δ‖²_F` for one editable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeProblem {
    /// `fan_in × n`
    pub h: DMatrix<f64>,
    /// `fan_out × n`
    pub r: DMatrix<f64>,
    pub lambda: f64,
}

impl RidgeProblem {
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>, lambda: f64) -> Result<Self> {
        let p = Self { h, r, lambda };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.h.ncols() != self.r.ncols() {
            return Err(EditError::Input(format!(
                "H has {} columns but R has {}",
                self.h.ncols(),
                self.r.ncols()
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(EditError::Input(format!("lambda must be positive and finite, got {}", self.lambda)));
        }
        if !all_finite(&self.h) || !all_finite(&self.r) {
            return Err(EditError::Input("non-finite entries in ridge problem".into()));
        }
        Ok(())
    }

    /// Value of the ridge objective at `delta`.
    pub fn objective(&self, delta: &DMatrix<f64>) -> f64 {
        let fit = delta * &self.h - &self.r;
        fit.norm_squared() + self.lambda * delta.norm_squared()
    }
}

/// `Δ = R Hᵀ (H Hᵀ + λI)⁻¹`, via a Cholesky solve on whichever of the
/// `fan_in × fan_in` or `n × n` Gram systems is smaller.
pub fn ridge_solve(problem: &RidgeProblem) -> Result<DMatrix<f64>> {
    problem.validate()?;
    let RidgeProblem { h, r, lambda } = problem;
    let (fan_in, n) = h.shape();
    let fail = || EditError::Numerical("ridge system is not positive definite".into());
    let delta = if n < fan_in {
        // R (HᵀH + λI)⁻¹ Hᵀ
        let mut gram = h.tr_mul(h);
        for i in 0..n {
            gram[(i, i)] += lambda;
        }
        let chol = gram.cholesky().ok_or_else(fail)?;
        // (HᵀH + λI)⁻¹ Rᵀ, then transpose and multiply by Hᵀ.
        let coef = chol.solve(&r.transpose());
        coef.tr_mul(&h.transpose())
    } else {
        let mut gram = h * h.transpose();
        for i in 0..fan_in {
            gram[(i, i)] += lambda;
        }
        let chol = gram.cholesky().ok_or_else(fail)?;
        chol.solve(&(h * r.transpose())).transpose()
    };
    if !all_finite(&delta) {
        return Err(EditError::Numerical("ridge solution is not finite".into()));
    }
    Ok(delta)
}

/// Target-minus-current residual: `M − θ₀H`.
pub fn residual_memit(target: &DMatrix<f64>, theta0_h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if target.shape() != theta0_h.shape() {
        return Err(EditError::Input(format!(
            "target shape {:?} differs from current output shape {:?}",
            target.shape(),
            theta0_h.shape()
        )));
    }
    Ok(target - theta0_h)
}

/// Gradient descent on the summed edit cross-entropy w.r.t. an additive
/// perturbation of `layer`'s MLP output at each label position.
pub fn optimize_delta_h(model: &Model, layer: usize, edit: &[Instance], steps: usize, lr: f64) -> Result<DMatrix<f64>> {
    if steps == 0 {
        return Err(EditError::Input("optimize_delta_h needs at least one step".into()));
    }
    if !model.editable_layers().contains(&layer) {
        return Err(EditError::Input(format!("layer {layer} is not editable")));
    }
    let mut delta = DMatrix::zeros(model.config().d_model, edit.len());
    for step in 0..steps {
        let (loss, grad) = model.perturbed_loss(layer, edit, &delta, true)?;
        if !loss.is_finite() {
            return Err(EditError::Numerical(format!("delta optimization diverged at step {step}")));
        }
        delta -= grad.expect("gradient requested") * lr;
    }
    Ok(delta)
}

/// `cᵢ = −η Σⱼ Hⱼᵢ H̃ⱼᵢ` for each column `i`.
pub fn token_coefficients(h: &DMatrix<f64>, h_tilde: &DMatrix<f64>, eta: f64) -> Result<DVector<f64>> {
    if h.shape() != h_tilde.shape() {
        return Err(EditError::Input(format!(
            "H shape {:?} differs from refined H shape {:?}",
            h.shape(),
            h_tilde.shape()
        )));
    }
    let rows = h.nrows();
    let c = h
        .as_slice()
        .chunks(rows.max(1))
        .zip(h_tilde.as_slice().chunks(rows.max(1)))
        .map(|(a, b)| -eta * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
        .take(h.ncols())
        .collect::<Vec<_>>();
    Ok(DVector::from_vec(c))
}

/// Scales column `i` of `g` by `coef[i]`.
pub fn scale_columns(g: &DMatrix<f64>, coef: &DVector<f64>) -> DMatrix<f64> {
    let mut out = g.clone();
    for (mut col, c) in out.column_iter_mut().zip(coef.iter()) {
        col *= *c;
    }
    out
}

/// Per-token residual: column `i` is `cᵢ · G̃[:, i]`.
pub fn residual_horse(h: &DMatrix<f64>, h_tilde: &DMatrix<f64>, g_tilde: &DMatrix<f64>, eta: f64) -> Result<DMatrix<f64>> {
    if g_tilde.ncols() != h.ncols() {
        return Err(EditError::Input(format!(
            "refined gradient has {} columns, H has {}",
            g_tilde.ncols(),
            h.ncols()
        )));
    }
    if !(eta > 0.0) {
        return Err(EditError::Input(format!("eta must be positive, got {eta}")));
    }
    let c = token_coefficients(h, h_tilde, eta)?;
    Ok(scale_columns(g_tilde, &c))
}

/// Residual divided by `T − l + 1` for 1-based layer position `l` of `T`.
pub fn spread_linear_decay(r: &DMatrix<f64>, l: usize, t: usize) -> Result<DMatrix<f64>> {
    if l == 0 || l > t {
        return Err(EditError::Input(format!("layer position {l} outside 1..={t}")));
    }
    Ok(r / (t - l + 1) as f64)
}

/// Per-layer residuals for the editable layers, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStack {
    pub layers: Vec<usize>,
    pub residuals: Vec<DMatrix<f64>>,
    /// Learning rate used to build each layer's residual.
    pub eta: Vec<f64>,
}

impl ResidualStack {
    pub fn new(layers: Vec<usize>, residuals: Vec<DMatrix<f64>>, eta: Vec<f64>) -> Result<Self> {
        let s = Self { layers, residuals, eta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.residuals.len() || self.layers.len() != self.eta.len() {
            return Err(EditError::Input("residual stack fields have different lengths".into()));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EditError::Input("residual stack layers must be increasing".into()));
        }
        if let Some(first) = self.residuals.first() {
            if self.residuals.iter().any(|r| r.shape() != first.shape()) {
                return Err(EditError::Input("residuals differ in shape".into()));
            }
        }
        if self.residuals.iter().any(|r| !all_finite(r)) {
            return Err(EditError::Input("non-finite residual".into()));
        }
        if self.eta.iter().any(|&e| !(e > 0.0)) {
            return Err(EditError::Input("eta must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Copies one residual to every layer.
pub fn spread_uniform(r: &DMatrix<f64>, layers: &[usize]) -> ResidualStack {
    ResidualStack {
        layers: layers.to_vec(),
        residuals: vec![r.clone(); layers.len()],
        eta: vec![1.0; layers.len()],
    }
}

/// Which predecessor each residual is projected against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predecessor {
    /// The already-orthogonalized residual of the previous layer.
    #[default]
    Orthogonalized,
    /// The raw residual of the previous layer.
    Raw,
}

/// Projection coefficient for `r` against `p`, or `None` on the skip path.
fn projection(r: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<(f64, f64)> {
    let pp = p.norm_squared();
    if pp <= SPREAD_EPS * p.len() as f64 {
        return None;
    }
    Some((frobenius_inner(r, p) / pp, pp))
}

/// Removes from each residual its component along the previous layer's
/// residual, in increasing layer order. The first layer is left untouched.
pub fn spread_orthogonal(stack: &ResidualStack, predecessor: Predecessor) -> Result<ResidualStack> {
    stack.validate()?;
    let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(stack.len());
    for (l, r) in stack.residuals.iter().enumerate() {
        if l == 0 {
            out.push(r.clone());
            continue;
        }
        let p = match predecessor {
            Predecessor::Orthogonalized => &out[l - 1],
            Predecessor::Raw => &stack.residuals[l - 1],
        };
        let next = match projection(r, p) {
            Some((a, _)) => {
                let q = r - p * a;
                if q.norm_squared() <= CANCEL_REL * CANCEL_REL * r.norm_squared() {
                    DMatrix::zeros(r.nrows(), r.ncols())
                } else {
                    q
                }
            }
            None => r.clone(),
        };
        out.push(next);
    }
    Ok(ResidualStack { layers: stack.layers.clone(), residuals: out, eta: stack.eta.clone() })
}

/// Reverse-mode derivative of [`spread_orthogonal`]: maps gradients on the
/// spread residuals to gradients on the raw residuals.
pub(crate) fn spread_orthogonal_backward(
    raw: &[DMatrix<f64>],
    spread: &[DMatrix<f64>],
    d_spread: &[DMatrix<f64>],
    predecessor: Predecessor,
) -> Vec<DMatrix<f64>> {
    let t = raw.len();
    let mut bar: Vec<DMatrix<f64>> = d_spread.to_vec();
    let mut d_raw: Vec<DMatrix<f64>> = raw.iter().map(|r| DMatrix::zeros(r.nrows(), r.ncols())).collect();
    for l in (1..t).rev() {
        let p = match predecessor {
            Predecessor::Orthogonalized => &spread[l - 1],
            Predecessor::Raw => &raw[l - 1],
        };
        let r = &raw[l];
        match projection(r, p) {
            None => d_raw[l] += &bar[l],
            Some((a, pp)) => {
                let bp = frobenius_inner(&bar[l], p) / pp;
                d_raw[l] += &bar[l] - p * bp;
                let dp = r * (-bp) + p * (2.0 * a * bp) - &bar[l] * a;
                match predecessor {
                    Predecessor::Orthogonalized => bar[l - 1] += dp,
                    Predecessor::Raw => d_raw[l - 1] += dp,
                }
            }
        }
    }
    if t > 0 {
        d_raw[0] += &bar[0];
    }
    d_raw
}

/// Divides each layer's residual by `T − l + 1` (1-based position `l`).
pub fn spread_linear_decay_stack(stack: &ResidualStack) -> Result<ResidualStack> {
    stack.validate()?;
    let t = stack.len();
    let residuals = stack
        .residuals
        .iter()
        .enumerate()
        .map(|(i, r)| spread_linear_decay(r, i + 1, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualStack { layers: stack.layers.clone(), residuals, eta: stack.eta.clone() })
}

/// Pairs each layer's hook `H` with its spread residual and `λ = e^{log λ}`.
pub fn build_layer_problems(hooks: &[HookRecord], stack: &ResidualStack, log_lambdas: &[f64]) -> Result<Vec<RidgeProblem>> {
    let hook_layers: Vec<usize> = hooks.iter().map(|h| h.layer).collect();
    if hook_layers != stack.layers {
        return Err(EditError::Input(format!(
            "hook layers {hook_layers:?} differ from residual layers {:?}",
            stack.layers
        )));
    }
    if log_lambdas.len() != hooks.len() {
        return Err(EditError::Input(format!(
            "{} lambdas for {} layers",
            log_lambdas.len(),
            hooks.len()
        )));
    }
    hooks
        .iter()
        .zip(&stack.residuals)
        .zip(log_lambdas)
        .map(|((hook, r), &ll)| RidgeProblem::new(hook.h.clone(), r.clone(), ll.exp()).map_err(|e| e.context(format!("layer {}", hook.layer))))
        .collect()
}

/// Solves every layer's ridge problem, in parallel when enabled.
pub fn solve_all(problems: &[RidgeProblem]) -> Result<Vec<DMatrix<f64>>> {
    crate::par::map(problems, ridge_solve).into_iter().collect()
}
