//! In-process experiment building blocks shared by the commands and the
//! acceptance suite.

use horse_core::eval::{generate_corpus, FactCorpus};
use horse_core::hypernet::{train_hypernetwork, HyperNet, TrainLog};
use horse_core::model::{train_base_model, BaseTrainReport};
use horse_core::pipeline::{edit_massive, EditOptions, EditReport, EditRequest, Variant};
use horse_core::{Model, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Corpus, base model and the networks needed by the ablation variants.
pub struct Artifacts {
    pub corpus: FactCorpus,
    pub base: Model,
    pub base_report: BaseTrainReport,
    pub net: HyperNet,
    pub log: TrainLog,
}

pub fn build_corpus(cfg: &RunConfig) -> Result<FactCorpus> {
    let corpus = generate_corpus(&cfg.corpus)?;
    corpus.check_hygiene()?;
    Ok(corpus)
}

pub fn train_base(cfg: &RunConfig, corpus: &FactCorpus) -> Result<(Model, BaseTrainReport)> {
    train_base_model(&cfg.model, &corpus.base_training_set(), &cfg.base_train)
}

/// Trains the network a variant edits with.
pub fn train_net(cfg: &RunConfig, base: &Model, corpus: &FactCorpus, variant: Variant) -> Result<(HyperNet, TrainLog)> {
    let loss = variant.training_loss(cfg.edit.predecessor);
    train_hypernetwork(base, &corpus.train_edits(), &cfg.hyper, &loss)
}

/// Corpus, base model and the `full` network for `cfg.seed`.
pub fn build(cfg: &RunConfig) -> Result<Artifacts> {
    let corpus = build_corpus(cfg)?;
    let (base, base_report) = train_base(cfg, &corpus)?;
    log::info!("seed {}: base accuracy {:.4}", cfg.seed, base_report.accuracy);
    let (net, log) = train_net(cfg, &base, &corpus, Variant::Full)?;
    Ok(Artifacts { corpus, base, base_report, net, log })
}

pub fn edit_options(cfg: &RunConfig, variant: Variant) -> EditOptions {
    EditOptions { variant, predecessor: cfg.edit.predecessor, memit: cfg.edit.memit.clone() }
}

/// Massive editing of the first `n_edits` corpus edits (all when `None`).
pub fn run_edits(
    cfg: &RunConfig,
    base: &Model,
    net: &HyperNet,
    corpus: &FactCorpus,
    variant: Variant,
    n_edits: Option<usize>,
) -> Result<(Model, EditReport)> {
    let instances = take_edits(corpus, n_edits)?;
    let request = EditRequest { instances, batch_size: cfg.edit.batch_size, variant, seed: cfg.seed };
    edit_massive(base, net, &request, &edit_options(cfg, variant), None).map_err(|e| e.error)
}

pub fn take_edits(corpus: &FactCorpus, n: Option<usize>) -> Result<Vec<horse_core::pipeline::EditInstance>> {
    let all = corpus.edits();
    match n {
        None => Ok(all),
        Some(n) if n >= 1 && n <= all.len() => Ok(all[..n].to_vec()),
        Some(n) => Err(horse_core::EditError::Config(format!(
            "num_edits {n} must be between 1 and the {} edits in the corpus",
            all.len()
        ))),
    }
}

/// One ablation table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: Variant,
    pub efficacy: f64,
    pub generalization: Option<f64>,
    pub specificity: Option<f64>,
}

/// Directional comparisons across the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directionality {
    pub seeds: usize,
    /// Seeds on which full's specificity is at least no_orthogonal_spread's.
    pub full_spe_ge_uniform: usize,
    /// Mean no_ci efficacy over mean full efficacy.
    pub no_ci_efficacy_ratio: Option<f64>,
    /// Mean no_training efficacy over mean full efficacy.
    pub no_training_efficacy_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub directionality: Directionality,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str = "seed,variant,efficacy,generalization,specificity";

    pub fn new(rows: Vec<AblationRow>) -> AblationTable {
        let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        seeds.dedup();
        let find = |s: u64, v: Variant| rows.iter().find(|r| r.seed == s && r.variant == v);
        let full_spe_ge_uniform = seeds
            .iter()
            .filter(|&&s| match (find(s, Variant::Full), find(s, Variant::NoOrthogonalSpread)) {
                (Some(f), Some(u)) => f.specificity.unwrap_or(0.0) >= u.specificity.unwrap_or(0.0),
                _ => false,
            })
            .count();
        let mean_eff = |v: Variant| {
            let e: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.efficacy).collect();
            (!e.is_empty()).then(|| e.iter().sum::<f64>() / e.len() as f64)
        };
        let ratio = |v: Variant| match (mean_eff(v), mean_eff(Variant::Full)) {
            (Some(a), Some(f)) if f > 0.0 => Some(a / f),
            _ => None,
        };
        let directionality = Directionality {
            seeds: seeds.len(),
            full_spe_ge_uniform,
            no_ci_efficacy_ratio: ratio(Variant::NoCi),
            no_training_efficacy_ratio: ratio(Variant::NoTraining),
        };
        AblationTable { rows, directionality }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.4},{},{}\n",
                r.seed,
                r.variant,
                r.efficacy,
                crate::output::csv_metric(r.generalization),
                crate::output::csv_metric(r.specificity)
            ));
        }
        s
    }
}

/// Every ablation variant on one set of artifacts. `no_ci_in_loss` trains
/// its own network.
pub fn ablate(cfg: &RunConfig, base: &Model, net: &HyperNet, corpus: &FactCorpus) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let mut own: Option<HyperNet> = None;
    for v in Variant::ABLATION {
        let use_net = if v.trains_own_network() {
            if own.is_none() {
                own = Some(train_net(cfg, base, corpus, v)?.0);
            }
            own.as_ref().expect("trained above")
        } else {
            net
        };
        let (_, report) = run_edits(cfg, base, use_net, corpus, v, cfg.edit.num_edits)?;
        let m = report.metrics.expect("metrics are set on success");
        log::info!("seed {} {v}: {:?}", cfg.seed, m);
        rows.push(AblationRow {
            seed: cfg.seed,
            variant: v,
            efficacy: m.efficacy,
            generalization: m.generalization,
            specificity: m.specificity,
        });
    }
    Ok(rows)
}
