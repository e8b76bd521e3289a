use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::engine::{self, Example, GradMode, PassOptions};
use super::{init_model, Instance, Model, ModelConfig, Weights};
use crate::error::{EditError, Result};

/// How per-instance cross-entropies are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Each group (edit, equivalent, unrelated) contributes its mean.
    Mean,
    /// Plain sum over every scored token.
    Sum,
}

#[derive(Debug, Clone)]
pub struct SupervisedLoss {
    pub loss: f64,
    /// Gradients w.r.t. each editable matrix, in `editable_layers` order.
    pub editable_grads: Vec<DMatrix<f64>>,
}

/// Captured hook data for one editable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HookRecord {
    pub layer: usize,
    /// `d_ff × n`: inputs to the editable matrix at each label position.
    pub h: DMatrix<f64>,
    /// `d_model × n`: loss gradients at the editable output, same positions.
    pub g: DMatrix<f64>,
}

fn group_weight(n: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Mean => 1.0 / n.max(1) as f64,
        Reduction::Sum => 1.0,
    }
}

pub(crate) fn loss_examples(
    model: &Model,
    edit: &[Instance],
    equivalent: &[Instance],
    unrelated: &[Instance],
    reduction: Reduction,
) -> Result<Vec<Example>> {
    if edit.is_empty() {
        return Err(EditError::Input("empty edit batch".into()));
    }
    let mut out = Vec::with_capacity(edit.len() + equivalent.len() + unrelated.len());
    for group in [edit, equivalent, unrelated] {
        let w = group_weight(group.len(), reduction);
        for inst in group {
            inst.validate(&model.config)?;
            out.push(inst.example(w));
        }
    }
    Ok(out)
}

fn editable_grads(model: &Model, grads: &Weights) -> Vec<DMatrix<f64>> {
    model
        .config
        .editable_layers
        .iter()
        .map(|&l| grads.layers[l].w_out.clone())
        .collect()
}

/// Cross-entropy over edit and equivalent targets plus a preservation term
/// on unrelated instances, with gradients for every editable matrix.
///
/// Unrelated instances must carry the pre-edit model's greedy outputs as
/// their targets (see [`greedy_labels`]).
pub fn supervised_loss(
    model: &Model,
    edit: &[Instance],
    equivalent: &[Instance],
    unrelated: &[Instance],
    reduction: Reduction,
) -> Result<SupervisedLoss> {
    let examples = loss_examples(model, edit, equivalent, unrelated, reduction)?;
    let opts = PassOptions { grads: GradMode::Editable, perturb_layer: None, capture: false };
    let pass = engine::run_batched(model, &examples, &opts);
    if !pass.loss.is_finite() {
        return Err(EditError::Numerical("non-finite supervised loss".into()));
    }
    let grads = pass.grads.expect("gradients requested");
    Ok(SupervisedLoss { loss: pass.loss, editable_grads: editable_grads(model, &grads) })
}

/// Relabels prompts with `model`'s greedy continuation of the same length.
pub fn greedy_labels(model: &Model, instances: &[Instance]) -> Result<Vec<Instance>> {
    let out = crate::par::map(instances, |inst| {
        model
            .greedy(&inst.prompt, inst.target.len().max(1))
            .map(|t| Instance::new(inst.prompt.clone(), t))
    });
    out.into_iter().collect()
}

/// One forward and one backward pass over the edit batch, capturing the
/// editable-matrix input and output gradient at every label position.
///
/// Equivalent and unrelated instances do not share positions with the edit
/// sequences, so only the edit batch is run; `G` is the gradient of the
/// summed loss.
pub fn collect_hooks(
    model: &Model,
    edit: &[Instance],
    equivalent: &[Instance],
    unrelated: &[Instance],
) -> Result<Vec<HookRecord>> {
    for inst in equivalent.iter().chain(unrelated) {
        inst.validate(&model.config)?;
    }
    let examples = loss_examples(model, edit, &[], &[], Reduction::Sum)?;
    let opts = PassOptions { grads: GradMode::None, perturb_layer: None, capture: true };
    let pass = engine::run_batched(model, &examples, &opts);
    Ok(model
        .config
        .editable_layers
        .iter()
        .map(|&l| HookRecord { layer: l, h: pass.hidden[l].clone(), g: pass.out_grad[l].clone() })
        .collect())
}

impl Model {
    /// MLP activations (inputs to the editable matrices) from a plain forward
    /// pass: `[instance][layer]` is a `d_ff × len` matrix over every input
    /// position of that instance.
    pub fn mlp_activations(&self, instances: &[Instance]) -> Result<Vec<Vec<DMatrix<f64>>>> {
        for i in instances {
            i.validate(&self.config)?;
        }
        let examples: Vec<Example> = instances.iter().map(|i| i.example(0.0)).collect();
        Ok(engine::trace_activations(self, &examples))
    }

    /// Summed loss and its gradient w.r.t. an additive perturbation of
    /// `layer`'s MLP output at each edit instance's label position.
    pub fn perturbed_loss(
        &self,
        layer: usize,
        edit: &[Instance],
        delta: &DMatrix<f64>,
        with_grad: bool,
    ) -> Result<(f64, Option<DMatrix<f64>>)> {
        if layer >= self.config.n_layers {
            return Err(EditError::Input(format!("layer {layer} out of range")));
        }
        if delta.shape() != (self.config.d_model, edit.len()) {
            return Err(EditError::Input("perturbation shape mismatch".into()));
        }
        let mut examples = loss_examples(self, edit, &[], &[], Reduction::Sum)?;
        for (i, e) in examples.iter_mut().enumerate() {
            e.delta = Some(delta.column(i).into_owned());
        }
        let opts = PassOptions { grads: GradMode::None, perturb_layer: Some(layer), capture: with_grad };
        let pass = engine::run_batched(self, &examples, &opts);
        let grad = with_grad.then(|| pass.out_grad[layer].clone());
        Ok((pass.loss, grad))
    }

    /// Outputs of `layer`'s editable matrix (without bias) at each instance's
    /// label position.
    pub fn editable_outputs(&self, layer: usize, instances: &[Instance]) -> Result<DMatrix<f64>> {
        for i in instances {
            i.validate(&self.config)?;
        }
        let examples: Vec<Example> = instances.iter().map(|i| i.example(0.0)).collect();
        let opts = PassOptions { grads: GradMode::None, perturb_layer: None, capture: true };
        Ok(engine::run_batched(self, &examples, &opts).editable_out[layer].clone())
    }

    /// Residual stream after `layer` at each instance's label position.
    pub fn residual_stream(&self, layer: usize, instances: &[Instance]) -> Result<DMatrix<f64>> {
        if layer >= self.config.n_layers {
            return Err(EditError::Input(format!("layer {layer} out of range")));
        }
        for i in instances {
            i.validate(&self.config)?;
        }
        let examples: Vec<Example> = instances.iter().map(|i| i.example(0.0)).collect();
        let opts = PassOptions { grads: GradMode::None, perturb_layer: None, capture: true };
        Ok(engine::run_batched(self, &examples, &opts).stream[layer].clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Stop early once the mean loss falls to this value.
    #[serde(default)]
    pub stop_loss: Option<f64>,
    /// Accuracy the caller expects; the achieved value is always reported.
    #[serde(default = "default_target_accuracy")]
    pub target_accuracy: f64,
    /// Which tensors are updated; the rest keep their initial values.
    #[serde(default)]
    pub trainable: Trainable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    /// Every tensor.
    All,
    /// Only the MLP projections and biases, so facts are stored in the MLPs.
    #[default]
    Mlp,
}

impl Trainable {
    fn includes(self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Mlp => ["w_in", "b_in", "w_out", "b_out"].iter().any(|t| name.ends_with(t)),
        }
    }
}

fn default_target_accuracy() -> f64 {
    0.95
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self { steps: 400, lr: 1e-2, stop_loss: Some(2e-3), target_accuracy: 0.95, trainable: Trainable::Mlp }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainReport {
    pub steps_run: usize,
    pub final_loss: f64,
    pub accuracy: f64,
    pub reached_target: bool,
}

struct Adam {
    m: Weights,
    v: Weights,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(w: &Weights) -> Self {
        Self { m: Weights::zeros_like(w), v: Weights::zeros_like(w), t: 0 }
    }

    fn step(&mut self, params: &mut Weights, grads: &Weights, lr: f64, trainable: Trainable) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let it = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((name, p), (_, g)), (_, m)), (_, v)) in it {
            if !trainable.includes(&name) {
                continue;
            }
            for (((p, g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Fraction of instances whose greedy continuation matches the target exactly.
pub(crate) fn greedy_accuracy(model: &Model, instances: &[Instance]) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let hits = crate::par::map(instances, |i| model.greedy(&i.prompt, i.target.len()).map(|o| o == i.target));
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / instances.len() as f64)
}

/// Full-batch Adam on the mean cross-entropy of `corpus` from a fresh
/// `init_model(config)`.
pub fn train_base_model(
    config: &ModelConfig,
    corpus: &[Instance],
    train: &BaseTrainConfig,
) -> Result<(Model, BaseTrainReport)> {
    if corpus.is_empty() {
        return Err(EditError::Input("empty training corpus".into()));
    }
    let mut model = init_model(config)?;
    let weight = 1.0 / corpus.len() as f64;
    let mut examples = Vec::with_capacity(corpus.len());
    for inst in corpus {
        inst.validate(&model.config)?;
        examples.push(inst.example(weight));
    }
    let opts = PassOptions { grads: GradMode::All, perturb_layer: None, capture: false };
    let mut adam = Adam::new(&model.weights);
    let mut final_loss = f64::NAN;
    let mut steps_run = 0;
    for step in 0..train.steps {
        let pass = engine::run_batched(&model, &examples, &opts);
        if !pass.loss.is_finite() {
            return Err(EditError::Divergence { step, detail: "non-finite base training loss".into() });
        }
        final_loss = pass.loss;
        if train.stop_loss.is_some_and(|s| pass.loss <= s) {
            break;
        }
        adam.step(&mut model.weights, pass.grads.as_ref().expect("gradients"), train.lr, train.trainable);
        steps_run = step + 1;
        if step % 50 == 0 {
            log::debug!("base step {step} loss {:.6}", pass.loss);
        }
    }
    if train.steps > 0 {
        final_loss = engine::run_batched(&model, &examples, &PassOptions::loss_only()).loss;
    }
    let accuracy = greedy_accuracy(&model, corpus)?;
    log::info!("base model: {steps_run} steps, loss {final_loss:.5}, accuracy {accuracy:.4}");
    Ok((
        model,
        BaseTrainReport { steps_run, final_loss, accuracy, reached_target: accuracy >= train.target_accuracy },
    ))
}
