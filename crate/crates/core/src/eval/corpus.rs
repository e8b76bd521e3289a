//! Synthetic fact corpora.
//!
//! Token ids are laid out in three disjoint ranges: relation encodings (each
//! relation has one canonical encoding plus `n_paraphrases` alternates), then
//! objects, then subjects. A prompt is `[relation encoding, subject]` and the
//! target is a single object token.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::model::Instance;
use crate::pipeline::EditInstance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Base facts the model is trained on.
    pub n_facts: usize,
    pub vocab_size: usize,
    /// Alternate relation encodings per fact (equivalent prompts).
    pub n_paraphrases: usize,
    /// Unrelated probes attached to each edit instance.
    pub n_unrelated: usize,
    /// Facts rewritten by evaluation edits.
    #[serde(default = "default_n_edits")]
    pub n_edits: usize,
    /// Facts reserved for hypernetwork training edits.
    #[serde(default = "default_n_edits")]
    pub n_train_facts: usize,
    /// Counterfactual targets drawn per training fact.
    #[serde(default = "default_train_variants")]
    pub train_variants: usize,
    #[serde(default = "default_n_relations")]
    pub n_relations: usize,
    #[serde(default = "default_n_objects")]
    pub n_objects: usize,
}

fn default_n_edits() -> usize {
    50
}
fn default_train_variants() -> usize {
    4
}
fn default_n_relations() -> usize {
    4
}
fn default_n_objects() -> usize {
    32
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_facts: 200,
            vocab_size: 256,
            n_paraphrases: 2,
            n_unrelated: 2,
            n_edits: 50,
            n_train_facts: 50,
            train_variants: 4,
            n_relations: 4,
            n_objects: 32,
        }
    }
}

/// A base fact `(subject, relation) → object`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Rewritten by evaluation edits.
    Edit,
    /// Rewritten only while training the hypernetwork.
    Train,
    /// Never edited; source of unrelated probes.
    Holdout,
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub role: Role,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub equivalents: Vec<Vec<usize>>,
    pub unrelated: Vec<Vec<usize>>,
    /// The base fact's object; equal to `target` for holdout lines.
    pub original_target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactCorpus {
    pub seed: u64,
    /// Generation metadata; empty for corpora read back from JSONL.
    pub facts: Vec<Fact>,
    /// Relation id → its token encodings, canonical first.
    pub paraphrase_map: Vec<Vec<usize>>,
    pub records: Vec<CorpusRecord>,
}

fn capacity_error(msg: String) -> EditError {
    EditError::Config(format!("corpus capacity exceeded: {msg}"))
}

/// Builds a deterministic corpus from `config.seed`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<FactCorpus> {
    let c = config;
    if c.n_facts == 0 || c.n_relations == 0 || c.n_objects < 2 {
        return Err(EditError::Config("n_facts, n_relations must be positive and n_objects >= 2".into()));
    }
    let n_rel_tokens = c.n_relations * (1 + c.n_paraphrases);
    let reserved = n_rel_tokens + c.n_objects;
    if reserved >= c.vocab_size {
        return Err(capacity_error(format!(
            "{n_rel_tokens} relation tokens + {} objects leave no subjects in vocab {}",
            c.n_objects, c.vocab_size
        )));
    }
    let n_subjects = (c.vocab_size - reserved).min(c.n_facts);
    if n_subjects * c.n_relations < c.n_facts {
        return Err(capacity_error(format!(
            "{} facts need more than {n_subjects} subjects × {} relations",
            c.n_facts, c.n_relations
        )));
    }
    if c.n_edits + c.n_train_facts >= c.n_facts {
        return Err(capacity_error(format!(
            "{} edit + {} training facts leave no holdout among {}",
            c.n_edits, c.n_train_facts, c.n_facts
        )));
    }
    if c.n_unrelated > c.n_facts - c.n_edits - c.n_train_facts {
        return Err(capacity_error("more unrelated probes than holdout facts".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let paraphrase_map: Vec<Vec<usize>> = (0..c.n_relations)
        .map(|r| (0..=c.n_paraphrases).map(|k| r * (1 + c.n_paraphrases) + k).collect())
        .collect();
    let objects: Vec<usize> = (n_rel_tokens..n_rel_tokens + c.n_objects).collect();
    let mut subjects: Vec<usize> = (reserved..c.vocab_size).collect();
    subjects.shuffle(&mut rng);
    subjects.truncate(n_subjects);
    let offsets: Vec<usize> = (0..n_subjects).map(|_| rng.random_range(0..c.n_relations)).collect();

    let mut facts: Vec<Fact> = (0..c.n_facts)
        .map(|i| {
            let s = i % n_subjects;
            let k = i / n_subjects;
            Fact {
                subject: subjects[s],
                relation: (offsets[s] + k) % c.n_relations,
                object: objects[rng.random_range(0..objects.len())],
            }
        })
        .collect();
    facts.shuffle(&mut rng);

    let prompt = |f: &Fact, k: usize| vec![paraphrase_map[f.relation][k], f.subject];
    let holdout: Vec<usize> = (c.n_edits + c.n_train_facts..c.n_facts).collect();
    let counterfactual = |rng: &mut ChaCha8Rng, f: &Fact| loop {
        let o = objects[rng.random_range(0..objects.len())];
        if o != f.object {
            break o;
        }
    };

    let mut records = Vec::new();
    let edit_record = |rng: &mut ChaCha8Rng, f: &Fact, role: Role| {
        let new_object = counterfactual(rng, f);
        let unrelated: Vec<Vec<usize>> = holdout
            .choose_multiple(rng, c.n_unrelated)
            .map(|&u| prompt(&facts[u], 0))
            .collect();
        CorpusRecord {
            role,
            prompt: prompt(f, 0),
            target: vec![new_object],
            equivalents: (1..=c.n_paraphrases).map(|k| prompt(f, k)).collect(),
            unrelated,
            original_target: vec![f.object],
        }
    };
    for f in &facts[..c.n_edits] {
        records.push(edit_record(&mut rng, f, Role::Edit));
    }
    for f in &facts[c.n_edits..c.n_edits + c.n_train_facts] {
        for _ in 0..c.train_variants.max(1) {
            records.push(edit_record(&mut rng, f, Role::Train));
        }
    }
    for &h in &holdout {
        let f = &facts[h];
        records.push(CorpusRecord {
            role: Role::Holdout,
            prompt: prompt(f, 0),
            target: vec![f.object],
            equivalents: (1..=c.n_paraphrases).map(|k| prompt(f, k)).collect(),
            unrelated: Vec::new(),
            original_target: vec![f.object],
        });
    }
    let corpus = FactCorpus { seed: c.seed, facts, paraphrase_map, records };
    corpus.check_hygiene()?;
    Ok(corpus)
}

impl FactCorpus {
    fn relation_of(&self) -> impl Fn(usize) -> Option<usize> + '_ {
        move |tok| self.paraphrase_map.iter().position(|encs| encs.contains(&tok))
    }

    /// Verifies that no unrelated probe shares a (subject, relation) pair with
    /// any edit or training instance.
    pub fn check_hygiene(&self) -> Result<()> {
        let rel = self.relation_of();
        let key = |p: &[usize]| (rel(p[0]), p[p.len() - 1]);
        let edited: HashSet<(Option<usize>, usize)> = self
            .records
            .iter()
            .filter(|r| r.role != Role::Holdout)
            .map(|r| key(&r.prompt))
            .collect();
        for r in &self.records {
            for u in &r.unrelated {
                if edited.contains(&key(u)) {
                    return Err(EditError::Config(format!("unrelated probe {u:?} collides with an edited fact")));
                }
            }
        }
        Ok(())
    }

    fn edit_instance(r: &CorpusRecord) -> EditInstance {
        EditInstance {
            edit: Instance::new(r.prompt.clone(), r.target.clone()),
            equivalents: r.equivalents.iter().map(|p| Instance::new(p.clone(), r.target.clone())).collect(),
            // Targets are placeholders of the right length; specificity and
            // the preservation loss use the pre-edit model's own outputs.
            unrelated: r.unrelated.iter().map(|p| Instance::new(p.clone(), vec![0; r.target.len()])).collect(),
        }
    }

    /// Evaluation edits, in corpus order.
    pub fn edits(&self) -> Vec<EditInstance> {
        self.records.iter().filter(|r| r.role == Role::Edit).map(Self::edit_instance).collect()
    }

    /// Hypernetwork training edits.
    pub fn train_edits(&self) -> Vec<EditInstance> {
        self.records.iter().filter(|r| r.role == Role::Train).map(Self::edit_instance).collect()
    }

    /// Canonical prompts of the holdout facts.
    pub fn holdout_prompts(&self) -> Vec<Instance> {
        self.records
            .iter()
            .filter(|r| r.role == Role::Holdout)
            .map(|r| Instance::new(r.prompt.clone(), r.target.clone()))
            .collect()
    }

    /// Every base fact under every encoding, with its original object.
    pub fn base_training_set(&self) -> Vec<Instance> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            for p in std::iter::once(&r.prompt).chain(&r.equivalents) {
                if seen.insert(p.clone()) {
                    out.push(Instance::new(p.clone(), r.original_target.clone()));
                }
            }
        }
        out
    }

    /// Canonical prompts of every base fact with the original object.
    pub fn base_facts(&self) -> Vec<Instance> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.prompt.clone()))
            .map(|r| Instance::new(r.prompt.clone(), r.original_target.clone()))
            .collect()
    }

    pub fn n_paraphrases(&self) -> usize {
        self.records.first().map_or(0, |r| r.equivalents.len())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<FactCorpus> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusRecord = serde_json::from_str(&line)
                .map_err(|e| EditError::Input(format!("corpus line {}: {e}", i + 1)))?;
            if rec.prompt.is_empty() || rec.target.is_empty() {
                return Err(EditError::Input(format!("corpus line {}: empty prompt or target", i + 1)));
            }
            records.push(rec);
        }
        let paraphrase_map = relation_classes(&records);
        Ok(FactCorpus { seed: 0, facts: Vec::new(), paraphrase_map, records })
    }
}

/// Groups relation encodings that appear as equivalent prompts of one another.
fn relation_classes(records: &[CorpusRecord]) -> Vec<Vec<usize>> {
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for r in records {
        let encs: Vec<usize> = std::iter::once(&r.prompt).chain(&r.equivalents).filter_map(|p| p.first().copied()).collect();
        let (hit, rest): (Vec<Vec<usize>>, Vec<Vec<usize>>) =
            classes.into_iter().partition(|c| encs.iter().any(|e| c.contains(e)));
        let mut merged: Vec<usize> = hit.into_iter().flatten().chain(encs).collect();
        merged.sort_unstable();
        merged.dedup();
        classes = rest;
        classes.push(merged);
    }
    classes.sort();
    classes
}
