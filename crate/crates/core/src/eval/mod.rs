//! Synthetic corpora and the efficacy / generalization / specificity metrics.

pub mod corpus;

use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::model::{Instance, Model};
use crate::pipeline::EditInstance;

pub use corpus::{generate_corpus, CorpusConfig, CorpusRecord, Fact, FactCorpus, Role};

/// Pass/fail outcomes for one edit instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub index: usize,
    pub efficacy: bool,
    pub generalization: Vec<bool>,
    pub specificity: Vec<bool>,
}

/// Percentages in `[0, 100]`. `generalization` is `None` when no instance has
/// equivalent prompts, `specificity` likewise for unrelated probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub efficacy: f64,
    pub generalization: Option<f64>,
    pub specificity: Option<f64>,
    pub n_edits: usize,
    pub n_equivalents: usize,
    pub n_unrelated: usize,
    pub outcomes: Vec<InstanceOutcome>,
}

fn percent(passes: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * passes as f64 / total as f64)
}

impl MetricResult {
    pub fn from_outcomes(outcomes: Vec<InstanceOutcome>) -> MetricResult {
        let count = |f: &dyn Fn(&InstanceOutcome) -> &[bool]| {
            outcomes.iter().fold((0, 0), |(p, t), o| {
                let v = f(o);
                (p + v.iter().filter(|&&b| b).count(), t + v.len())
            })
        };
        let eff = outcomes.iter().filter(|o| o.efficacy).count();
        let (gp, gt) = count(&|o| &o.generalization);
        let (sp, st) = count(&|o| &o.specificity);
        MetricResult {
            efficacy: percent(eff, outcomes.len()).unwrap_or(0.0),
            generalization: percent(gp, gt),
            specificity: percent(sp, st),
            n_edits: outcomes.len(),
            n_equivalents: gt,
            n_unrelated: st,
            outcomes,
        }
    }
}

fn check_pair(pre: &Model, post: &Model) -> Result<()> {
    if pre.config() != post.config() {
        return Err(EditError::Input("pre- and post-edit models have different configs".into()));
    }
    Ok(())
}

fn hits(model: &Model, inst: &Instance) -> Result<bool> {
    Ok(model.greedy(&inst.prompt, inst.target.len())? == inst.target)
}

/// Efficacy and generalization are exact greedy matches of the edit target
/// under `post`; specificity is agreement of `post` with `pre` on unrelated
/// probes.
pub fn evaluate(pre: &Model, post: &Model, instances: &[EditInstance]) -> Result<MetricResult> {
    check_pair(pre, post)?;
    let outcomes = crate::par::map_range(instances.len(), |i| -> Result<InstanceOutcome> {
        let e = &instances[i];
        let specificity = e
            .unrelated
            .iter()
            .map(|u| {
                let len = u.target.len().max(1);
                Ok(pre.greedy(&u.prompt, len)? == post.greedy(&u.prompt, len)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InstanceOutcome {
            index: i,
            efficacy: hits(post, &e.edit)?,
            generalization: e.equivalents.iter().map(|q| hits(post, q)).collect::<Result<_>>()?,
            specificity,
        })
    });
    Ok(MetricResult::from_outcomes(outcomes.into_iter().collect::<Result<_>>()?))
}

/// Fraction of instances whose greedy continuation equals their target.
pub fn accuracy(model: &Model, instances: &[Instance]) -> Result<f64> {
    crate::model::greedy_accuracy(model, instances)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftStats {
    pub mean_kl: f64,
    pub max_kl: f64,
    /// Percentage of probes whose greedy next token is unchanged.
    pub agreement: f64,
    pub n_probes: usize,
}

/// KL(pre ‖ post) of the next-token distribution after each probe prompt and
/// the greedy agreement rate.
pub fn drift_probe(pre: &Model, post: &Model, prompts: &[Vec<usize>]) -> Result<DriftStats> {
    check_pair(pre, post)?;
    let per = crate::par::map(prompts, |p| -> Result<(f64, bool)> {
        let a = pre.next_token_log_probs(p)?;
        let b = post.next_token_log_probs(p)?;
        let kl: f64 = a.iter().zip(&b).map(|(la, lb)| la.exp() * (la - lb)).sum();
        let kl = kl.max(0.0);
        let agree = crate::model::argmax(a.iter().copied()) == crate::model::argmax(b.iter().copied());
        Ok((kl, agree))
    });
    let per: Vec<(f64, bool)> = per.into_iter().collect::<Result<_>>()?;
    let n = per.len();
    let sum: f64 = per.iter().map(|p| p.0).sum();
    Ok(DriftStats {
        mean_kl: if n > 0 { sum / n as f64 } else { 0.0 },
        max_kl: per.iter().map(|p| p.0).fold(0.0, f64::max),
        agreement: percent(per.iter().filter(|p| p.1).count(), n).unwrap_or(100.0),
        n_probes: n,
    })
}
