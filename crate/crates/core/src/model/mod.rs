//! Toy decoder-only transformer with hookable, editable MLP output matrices.
//!
//! Hidden states are stored column-wise: a `d × N` matrix holds one token
//! position per column. The editable matrix of layer `l` is the second MLP
//! projection `w_out` (`d_model × d_ff`); hooks capture its input (`d_ff`) and
//! the loss gradient at its output (`d_model`).

mod config;
pub(crate) mod engine;
mod train;

pub(crate) use train::greedy_accuracy;

use std::hash::{Hash, Hasher};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};

pub use config::{ModelConfig, DEFAULT_EDITABLE_TAIL};
pub use train::{
    collect_hooks, greedy_labels, supervised_loss, train_base_model, BaseTrainConfig, BaseTrainReport,
    HookRecord, Reduction, SupervisedLoss, Trainable,
};

/// A prompt and the tokens it should produce.
///
/// The label position is always the final prompt token: the position whose
/// next-token prediction is the first target token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instance {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

impl Instance {
    pub fn new(prompt: Vec<usize>, target: Vec<usize>) -> Self {
        Self { prompt, target }
    }

    pub fn label_position(&self) -> usize {
        self.prompt.len().saturating_sub(1)
    }

    /// Tokens fed to the model: the prompt followed by all but the last target token.
    pub fn input_tokens(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        if let Some((_, head)) = self.target.split_last() {
            t.extend_from_slice(head);
        }
        t
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(EditError::Input("empty prompt".into()));
        }
        if self.target.is_empty() {
            return Err(EditError::Input("empty target".into()));
        }
        if self.prompt.len() + self.target.len() > config.max_seq_len {
            return Err(EditError::Input(format!(
                "prompt + target length {} exceeds max_seq_len {}",
                self.prompt.len() + self.target.len(),
                config.max_seq_len
            )));
        }
        if let Some(t) = self.prompt.iter().chain(&self.target).find(|&&t| t >= config.vocab_size) {
            return Err(EditError::Input(format!("token {t} out of vocabulary")));
        }
        Ok(())
    }

    pub(crate) fn example(&self, weight: f64) -> engine::Example {
        let label = self.label_position();
        engine::Example {
            tokens: self.input_tokens(),
            targets: self.target.iter().enumerate().map(|(k, &t)| (label + k, t)).collect(),
            weight,
            label,
            delta: None,
        }
    }
}

/// Parameters of one transformer block. Vectors are stored as `n × 1` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: DMatrix<f64>,
    pub ln1_bias: DMatrix<f64>,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub ln2_gain: DMatrix<f64>,
    pub ln2_bias: DMatrix<f64>,
    pub w_in: DMatrix<f64>,
    pub b_in: DMatrix<f64>,
    /// The editable matrix, `d_model × d_ff`.
    pub w_out: DMatrix<f64>,
    pub b_out: DMatrix<f64>,
}

/// All model parameters; also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `d_model × vocab`, one column per token.
    pub token_emb: DMatrix<f64>,
    /// `d_model × max_seq_len`.
    pub pos_emb: DMatrix<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: DMatrix<f64>,
    pub lnf_bias: DMatrix<f64>,
    /// `vocab × d_model`.
    pub unembed: DMatrix<f64>,
}

impl Weights {
    pub fn zeros_like(other: &Weights) -> Weights {
        let mut w = other.clone();
        for (_, t) in w.tensors_mut() {
            t.fill(0.0);
        }
        w
    }

    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = vec![
            ("token_emb".to_string(), &self.token_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("ln1_gain"), &l.ln1_gain),
                (p("ln1_bias"), &l.ln1_bias),
                (p("wq"), &l.wq),
                (p("wk"), &l.wk),
                (p("wv"), &l.wv),
                (p("wo"), &l.wo),
                (p("ln2_gain"), &l.ln2_gain),
                (p("ln2_bias"), &l.ln2_bias),
                (p("w_in"), &l.w_in),
                (p("b_in"), &l.b_in),
                (p("w_out"), &l.w_out),
                (p("b_out"), &l.b_out),
            ]);
        }
        out.extend([
            ("lnf_gain".to_string(), &self.lnf_gain),
            ("lnf_bias".to_string(), &self.lnf_bias),
            ("unembed".to_string(), &self.unembed),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)> {
        let mut out = vec![
            ("token_emb".to_string(), &mut self.token_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("ln1_gain"), &mut l.ln1_gain),
                (p("ln1_bias"), &mut l.ln1_bias),
                (p("wq"), &mut l.wq),
                (p("wk"), &mut l.wk),
                (p("wv"), &mut l.wv),
                (p("wo"), &mut l.wo),
                (p("ln2_gain"), &mut l.ln2_gain),
                (p("ln2_bias"), &mut l.ln2_bias),
                (p("w_in"), &mut l.w_in),
                (p("b_in"), &mut l.b_in),
                (p("w_out"), &mut l.w_out),
                (p("b_out"), &mut l.b_out),
            ]);
        }
        out.extend([
            ("lnf_gain".to_string(), &mut self.lnf_gain),
            ("lnf_bias".to_string(), &mut self.lnf_bias),
            ("unembed".to_string(), &mut self.unembed),
        ]);
        out
    }

    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b * scale;
        }
    }
}

/// True for tensors that are logically vectors (gains and biases).
pub(crate) fn is_vector_tensor(name: &str) -> bool {
    name.ends_with("_gain") || name.ends_with("_bias") || name.ends_with("b_in") || name.ends_with("b_out")
}

/// Order-sensitive hash of the bit patterns of a tensor.
pub fn tensor_checksum(t: &DMatrix<f64>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    t.shape().hash(&mut h);
    for v in t.iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) weights: Weights,
}

/// Builds a model with weights drawn deterministically from `config.seed`.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    let config = config.resolved()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let mut normal = |rows: usize, cols: usize, std: f64| {
        let dist = Normal::new(0.0, std).expect("positive std");
        DMatrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
    };
    let token_emb = normal(d, config.vocab_size, 1.0);
    let pos_emb = normal(d, config.max_seq_len, 0.5);
    let proj_std = 1.0 / ((2 * config.n_layers) as f64).sqrt();
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            ln1_gain: DMatrix::from_element(d, 1, 1.0),
            ln1_bias: DMatrix::zeros(d, 1),
            wq: normal(d, d, 1.0 / (d as f64).sqrt()),
            wk: normal(d, d, 1.0 / (d as f64).sqrt()),
            wv: normal(d, d, 1.0 / (d as f64).sqrt()),
            wo: normal(d, d, proj_std / (d as f64).sqrt()),
            ln2_gain: DMatrix::from_element(d, 1, 1.0),
            ln2_bias: DMatrix::zeros(d, 1),
            w_in: normal(config.d_ff, d, 1.0 / (d as f64).sqrt()),
            b_in: DMatrix::zeros(config.d_ff, 1),
            w_out: normal(d, config.d_ff, proj_std / (config.d_ff as f64).sqrt()),
            b_out: DMatrix::zeros(d, 1),
        })
        .collect();
    let unembed = normal(config.vocab_size, d, 1.0 / (d as f64).sqrt());
    Ok(Model {
        weights: Weights {
            token_emb,
            pos_emb,
            layers,
            lnf_gain: DMatrix::from_element(d, 1, 1.0),
            lnf_bias: DMatrix::zeros(d, 1),
            unembed,
        },
        config,
    })
}

impl Model {
    /// Assembles a model from explicit weights, checking shapes and finiteness.
    pub fn from_parts(config: ModelConfig, weights: Weights) -> Result<Model> {
        let config = config.resolved()?;
        let reference = init_model(&config)?;
        if weights.layers.len() != config.n_layers {
            return Err(EditError::Format("layer count mismatch".into()));
        }
        for ((name, a), (_, b)) in weights.tensors().into_iter().zip(reference.weights.tensors()) {
            if a.shape() != b.shape() {
                return Err(EditError::Format(format!("tensor {name} has shape {:?}, expected {:?}", a.shape(), b.shape())));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(EditError::Format(format!("tensor {name} has non-finite entries")));
            }
        }
        Ok(Model { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn editable_layers(&self) -> &[usize] {
        &self.config.editable_layers
    }

    pub fn editable_matrix(&self, layer: usize) -> &DMatrix<f64> {
        &self.weights.layers[layer].w_out
    }

    /// Returns a copy with `delta` added to the editable matrix of `layer`.
    pub fn apply_delta(&self, layer: usize, delta: &DMatrix<f64>) -> Result<Model> {
        let mut out = self.clone();
        out.apply_delta_in_place(layer, delta)?;
        Ok(out)
    }

    pub(crate) fn apply_delta_in_place(&mut self, layer: usize, delta: &DMatrix<f64>) -> Result<()> {
        if !self.config.editable_layers.contains(&layer) {
            return Err(EditError::Input(format!("layer {layer} is not editable")));
        }
        let w = &mut self.weights.layers[layer].w_out;
        if w.shape() != delta.shape() {
            return Err(EditError::Input(format!(
                "delta shape {:?} does not match editable matrix {:?}",
                delta.shape(),
                w.shape()
            )));
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(EditError::Input("delta has non-finite entries".into()));
        }
        *w += delta;
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in self.weights.tensors() {
            name.hash(&mut h);
            tensor_checksum(t).hash(&mut h);
        }
        h.finish()
    }

    pub fn tensor_checksums(&self) -> Vec<(String, u64)> {
        self.weights
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, tensor_checksum(t)))
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(EditError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(EditError::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(EditError::Input(format!("token {t} out of vocabulary")));
        }
        Ok(())
    }

    /// Logits, one row per position: `len × vocab`.
    pub fn forward(&self, tokens: &[usize]) -> Result<DMatrix<f64>> {
        self.check_tokens(tokens)?;
        Ok(engine::sequence_logits(self, tokens).transpose())
    }

    /// Next-token log-probabilities after `tokens`.
    pub fn next_token_log_probs(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let logits = engine::sequence_logits(self, tokens);
        let last = logits.column(logits.ncols() - 1);
        let max = last.max();
        let lse = max + last.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(last.iter().map(|v| v - lse).collect())
    }

    /// Greedy decoding of `len` tokens; ties go to the lowest token id.
    pub fn greedy(&self, prompt: &[usize], len: usize) -> Result<Vec<usize>> {
        self.check_tokens(prompt)?;
        if prompt.len() + len > self.config.max_seq_len + 1 {
            return Err(EditError::Input("decode length exceeds max_seq_len".into()));
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let logits = engine::sequence_logits(self, &seq);
            let next = argmax(logits.column(logits.ncols() - 1).iter().copied());
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

/// Index of the maximum; the first (lowest) index wins ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
