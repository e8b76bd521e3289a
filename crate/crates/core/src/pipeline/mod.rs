//! End-to-end editing: batch edits, sequential massive editing and the
//! ablation variants.

mod report;

use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::edit_math::{optimize_delta_h, ridge_solve, Predecessor, RidgeProblem, ResidualStack};
use crate::error::{EditError, Result};
use crate::eval::evaluate;
use crate::hypernet::{
    apply_deltas, layer_deltas, predicted_residual, raw_residual, Coefficients, HyperNet, LossOptions,
    ResidualOptions, Spread,
};
use crate::model::{collect_hooks, greedy_labels, HookRecord, Instance, Model};

pub use report::{BatchReport, EditReport, MetricSummary};

/// An edit with its paraphrase and unrelated probes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditInstance {
    pub edit: Instance,
    pub equivalents: Vec<Instance>,
    pub unrelated: Vec<Instance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Per-layer residuals used as predicted, without the orthogonal step.
    NoOrthogonalSpread,
    /// Token coefficients replaced by the constant `−η`.
    NoCi,
    /// Network trained with a trace term built without token coefficients.
    NoCiInLoss,
    /// Identity network with the initial `λ` and `η`.
    NoTraining,
    /// Optimized output shift at the last editable layer, spread with linear
    /// decay and recomputed after each layer's update.
    MemitBaseline,
    /// Network residuals spread with linear decay.
    LinearDecaySpread,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoOrthogonalSpread,
        Variant::NoCi,
        Variant::NoCiInLoss,
        Variant::NoTraining,
        Variant::MemitBaseline,
        Variant::LinearDecaySpread,
    ];

    /// The rows of the ablation table.
    pub const ABLATION: [Variant; 5] =
        [Variant::Full, Variant::NoOrthogonalSpread, Variant::NoCi, Variant::NoCiInLoss, Variant::NoTraining];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoOrthogonalSpread => "no_orthogonal_spread",
            Variant::NoCi => "no_ci",
            Variant::NoCiInLoss => "no_ci_in_loss",
            Variant::NoTraining => "no_training",
            Variant::MemitBaseline => "memit_baseline",
            Variant::LinearDecaySpread => "linear_decay_spread",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| EditError::Config(format!("unknown variant {s:?}")))
    }

    /// Residual construction at edit time.
    pub fn residual_options(self, predecessor: Predecessor) -> ResidualOptions {
        let mut o = ResidualOptions { predecessor, ..Default::default() };
        match self {
            Variant::NoOrthogonalSpread => o.spread = Spread::Uniform,
            Variant::NoCi => o.coefficients = Coefficients::Constant,
            Variant::LinearDecaySpread => o.spread = Spread::LinearDecay,
            _ => {}
        }
        o
    }

    /// Loss used to train the network this variant edits with.
    pub fn training_loss(self, predecessor: Predecessor) -> LossOptions {
        LossOptions {
            residual: ResidualOptions { predecessor, ..Default::default() },
            trace_without_ci: self == Variant::NoCiInLoss,
        }
    }

    /// Whether the variant needs its own trained network.
    pub fn trains_own_network(self) -> bool {
        self == Variant::NoCiInLoss
    }

    pub fn uses_network(self) -> bool {
        self != Variant::MemitBaseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings for the output-shift baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemitConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
}

impl Default for MemitConfig {
    fn default() -> Self {
        Self { steps: 100, lr: 2.0, lambda: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditOptions {
    pub variant: Variant,
    #[serde(default)]
    pub predecessor: Predecessor,
    #[serde(default)]
    pub memit: MemitConfig,
}

/// A massive-editing job.
#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub instances: Vec<EditInstance>,
    pub batch_size: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(EditError::Config("batch_size must be at least 1".into()));
        }
        if self.instances.is_empty() {
            return Err(EditError::Input("no edit instances".into()));
        }
        Ok(())
    }
}

/// Checksums of each intermediate of one batch edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageChecksums {
    pub hooks: u64,
    pub raw_residual: u64,
    pub spread_residual: u64,
    pub deltas: u64,
    pub model: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchDiagnostics {
    pub n_instances: usize,
    /// `(layer, ‖Δθ‖_F)` per editable layer.
    pub delta_norms: Vec<(usize, f64)>,
    pub checksums: StageChecksums,
    pub raw: ResidualStack,
    pub spread: ResidualStack,
    pub elapsed_ms: f64,
}

fn checksum<'a>(mats: impl IntoIterator<Item = &'a DMatrix<f64>>) -> u64 {
    let mut h = DefaultHasher::new();
    for m in mats {
        m.shape().hash(&mut h);
        for v in m.iter() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

fn hook_checksum(hooks: &[HookRecord]) -> u64 {
    checksum(hooks.iter().flat_map(|h| [&h.h, &h.g]))
}

/// The network the variant edits with: NoTraining swaps in an identity net
/// with the initial `λ`, `η`.
fn effective_net(net: &HyperNet, variant: Variant) -> Result<HyperNet> {
    if variant != Variant::NoTraining {
        return Ok(net.clone());
    }
    let cfg = crate::hypernet::HyperNetConfig { init_scale: 0.0, ..net.config.clone() };
    HyperNet::new(&cfg, &net.layers, net.d_in, net.d_out)
}

fn split(batch: &[EditInstance], model: &Model) -> Result<(Vec<Instance>, Vec<Instance>, Vec<Instance>)> {
    if batch.is_empty() {
        return Err(EditError::Input("empty edit batch".into()));
    }
    let edits = batch.iter().map(|e| e.edit.clone()).collect();
    let equivalents = batch.iter().flat_map(|e| e.equivalents.iter().cloned()).collect();
    let unrelated: Vec<Instance> = batch.iter().flat_map(|e| e.unrelated.iter().cloned()).collect();
    let unrelated = greedy_labels(model, &unrelated)?;
    Ok((edits, equivalents, unrelated))
}

/// Applies one batch of edits to a copy of `model`.
pub fn edit_batch(
    model: &Model,
    net: &HyperNet,
    batch: &[EditInstance],
    opts: &EditOptions,
) -> Result<(Model, BatchDiagnostics)> {
    let start = Instant::now();
    let (edits, equivalents, unrelated) = split(batch, model)?;
    if opts.variant == Variant::MemitBaseline {
        return memit_batch(model, &edits, &opts.memit, start);
    }
    let hooks = collect_hooks(model, &edits, &equivalents, &unrelated)?;
    let net = effective_net(net, opts.variant)?;
    let residual = opts.variant.residual_options(opts.predecessor);
    let raw = raw_residual(&net, &hooks, &residual)?;
    let spread = predicted_residual(&net, &hooks, &residual)?;
    let deltas = layer_deltas(&net, &hooks, &spread)?;
    let edited = apply_deltas(model, &net.layers, &deltas)?;
    let diag = BatchDiagnostics {
        n_instances: batch.len(),
        delta_norms: net.layers.iter().zip(&deltas).map(|(&l, d)| (l, d.norm())).collect(),
        checksums: StageChecksums {
            hooks: hook_checksum(&hooks),
            raw_residual: checksum(&raw.residuals),
            spread_residual: checksum(&spread.residuals),
            deltas: checksum(&deltas),
            model: edited.checksum(),
        },
        raw,
        spread,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((edited, diag))
}

fn memit_batch(model: &Model, edits: &[Instance], cfg: &MemitConfig, start: Instant) -> Result<(Model, BatchDiagnostics)> {
    let layers = model.editable_layers().to_vec();
    let last = *layers.last().expect("editable layers are non-empty");
    let delta_h = optimize_delta_h(model, last, edits, cfg.steps, cfg.lr)?;
    let target = model.residual_stream(last, edits)? + delta_h;
    let mut current = model.clone();
    let t = layers.len();
    let mut raw = Vec::with_capacity(t);
    let mut spread = Vec::with_capacity(t);
    let mut deltas = Vec::with_capacity(t);
    let mut all_hooks = Vec::with_capacity(t);
    for (i, &layer) in layers.iter().enumerate() {
        let hooks = collect_hooks(&current, edits, &[], &[])?;
        let hook = hooks.into_iter().find(|h| h.layer == layer).expect("hook for editable layer");
        let r = crate::edit_math::residual_memit(&target, &current.residual_stream(last, edits)?)?;
        let spread_r = crate::edit_math::spread_linear_decay(&r, i + 1, t)?;
        let delta = ridge_solve(&RidgeProblem::new(hook.h.clone(), spread_r.clone(), cfg.lambda)?)
            .map_err(|e| e.context(format!("layer {layer}")))?;
        current.apply_delta_in_place(layer, &delta)?;
        raw.push(r);
        spread.push(spread_r);
        deltas.push(delta);
        all_hooks.push(hook);
    }
    let eta = vec![1.0; t];
    let diag = BatchDiagnostics {
        n_instances: edits.len(),
        delta_norms: layers.iter().zip(&deltas).map(|(&l, d)| (l, d.norm())).collect(),
        checksums: StageChecksums {
            hooks: hook_checksum(&all_hooks),
            raw_residual: checksum(&raw),
            spread_residual: checksum(&spread),
            deltas: checksum(&deltas),
            model: current.checksum(),
        },
        raw: ResidualStack { layers: layers.clone(), residuals: raw, eta: eta.clone() },
        spread: ResidualStack { layers, residuals: spread, eta },
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((current, diag))
}

/// Failure partway through massive editing, with the batches completed so far.
#[derive(Debug)]
pub struct MassiveEditError {
    pub error: EditError,
    pub partial: EditReport,
}

impl fmt::Display for MassiveEditError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "after {} completed batches: {}", self.partial.batches.len(), self.error)
    }
}

impl std::error::Error for MassiveEditError {}

/// Called after each batch with `(batch index, model so far)`.
pub type BatchHook<'a> = dyn FnMut(usize, &Model, &BatchDiagnostics) -> Result<()> + 'a;

/// Applies `edit_batch` to consecutive batches, each on the previous result,
/// then evaluates every edited instance on the final model.
pub fn edit_massive(
    model: &Model,
    net: &HyperNet,
    request: &EditRequest,
    opts: &EditOptions,
    mut on_batch: Option<&mut BatchHook<'_>>,
) -> std::result::Result<(Model, EditReport), MassiveEditError> {
    let mut report = EditReport::new(request, opts);
    let fail = |error: EditError, partial: EditReport| MassiveEditError { error, partial };
    if let Err(e) = request.validate() {
        return Err(fail(e, report));
    }
    let mut current = model.clone();
    for (k, chunk) in request.instances.chunks(request.batch_size).enumerate() {
        let (next, diag) = match edit_batch(&current, net, chunk, opts) {
            Ok(v) => v,
            Err(e) => return Err(fail(e.context(format!("batch {k}")), report)),
        };
        if let Some(cb) = on_batch.as_mut() {
            if let Err(e) = cb(k, &next, &diag) {
                return Err(fail(e, report));
            }
        }
        report.push_batch(k, &diag);
        current = next;
    }
    match evaluate(model, &current, &request.instances) {
        Ok(m) => report.set_metrics(&m, request.batch_size),
        Err(e) => return Err(fail(e, report)),
    }
    Ok((current, report))
}
