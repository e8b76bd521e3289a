#![allow(dead_code)]

use horse_core::eval::{generate_corpus, CorpusConfig, FactCorpus};
use horse_core::model::{init_model, train_base_model, BaseTrainConfig, Instance, Model, ModelConfig, Trainable};

/// d = 8 configuration used by the finite-difference oracles.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: 16,
        n_heads: 2,
        max_seq_len: 6,
        editable_layers: vec![],
        seed,
        precision: 64,
    }
}

pub fn tiny_model(seed: u64) -> Model {
    init_model(&tiny_config(seed)).unwrap()
}

pub fn inst(prompt: &[usize], target: &[usize]) -> Instance {
    Instance::new(prompt.to_vec(), target.to_vec())
}

/// Relative error with a floor on the denominator so that entries whose
/// gradient is essentially zero are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central difference of `f` at step `h`.
pub fn central(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Small corpus and a base model fitted to it.
pub fn small_trained(seed: u64) -> (FactCorpus, Model) {
    let corpus = generate_corpus(&CorpusConfig {
        seed,
        n_facts: 80,
        vocab_size: 64,
        n_paraphrases: 1,
        n_unrelated: 2,
        n_edits: 10,
        n_train_facts: 25,
        train_variants: 2,
        n_relations: 2,
        n_objects: 8,
    })
    .unwrap();
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 64,
        n_heads: 2,
        max_seq_len: 4,
        editable_layers: vec![],
        seed,
        precision: 64,
    };
    let train = BaseTrainConfig { steps: 400, lr: 1e-2, stop_loss: Some(0.05), trainable: Trainable::All, ..Default::default() };
    let (model, _) = train_base_model(&cfg, &corpus.base_training_set(), &train).unwrap();
    (corpus, model)
}
