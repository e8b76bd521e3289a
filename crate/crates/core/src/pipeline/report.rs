use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{BatchDiagnostics, EditOptions, EditRequest, StageChecksums};
use crate::edit_math::Predecessor;
use crate::eval::{InstanceOutcome, MetricResult};

/// Efficacy / generalization / specificity percentages. A metric with no
/// probes is `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub efficacy: f64,
    pub generalization: Option<f64>,
    pub specificity: Option<f64>,
}

impl From<&MetricResult> for MetricSummary {
    fn from(m: &MetricResult) -> Self {
        Self { efficacy: m.efficacy, generalization: m.generalization, specificity: m.specificity }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub layer: usize,
    pub frobenius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub index: usize,
    pub n_instances: usize,
    pub delta_norms: Vec<LayerNorm>,
    /// Hex checksums of each pipeline stage.
    pub checksums: ChecksumHex,
    /// Final-model metrics over this batch's instances.
    pub metrics: Option<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecksumHex {
    pub hooks: String,
    pub raw_residual: String,
    pub spread_residual: String,
    pub deltas: String,
    pub model: String,
}

impl From<StageChecksums> for ChecksumHex {
    fn from(c: StageChecksums) -> Self {
        let h = |v: u64| format!("{v:016x}");
        Self {
            hooks: h(c.hooks),
            raw_residual: h(c.raw_residual),
            spread_residual: h(c.spread_residual),
            deltas: h(c.deltas),
            model: h(c.model),
        }
    }
}

/// Outcome of a massive-editing run. Wall-clock timings are kept out of the
/// serialized report so that reports are reproducible byte for byte; they
/// are written separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub variant: String,
    pub predecessor: Predecessor,
    pub seed: u64,
    pub batch_size: usize,
    pub n_edits: usize,
    pub metrics: Option<MetricSummary>,
    pub batches: Vec<BatchReport>,
    #[serde(skip)]
    pub timings_ms: Vec<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "skipped".to_string(), |x| format!("{x:.4}"))
}

impl EditReport {
    pub(crate) fn new(request: &EditRequest, opts: &EditOptions) -> Self {
        Self {
            variant: opts.variant.name().to_string(),
            predecessor: opts.predecessor,
            seed: request.seed,
            batch_size: request.batch_size,
            n_edits: request.instances.len(),
            metrics: None,
            batches: Vec::new(),
            timings_ms: Vec::new(),
        }
    }

    pub(crate) fn push_batch(&mut self, index: usize, diag: &BatchDiagnostics) {
        self.batches.push(BatchReport {
            index,
            n_instances: diag.n_instances,
            delta_norms: diag.delta_norms.iter().map(|&(layer, frobenius)| LayerNorm { layer, frobenius }).collect(),
            checksums: diag.checksums.into(),
            metrics: None,
        });
        self.timings_ms.push(diag.elapsed_ms);
    }

    pub(crate) fn set_metrics(&mut self, m: &MetricResult, batch_size: usize) {
        self.metrics = Some(m.into());
        for b in &mut self.batches {
            let lo = b.index * batch_size;
            let outs: Vec<InstanceOutcome> = m.outcomes[lo..lo + b.n_instances].to_vec();
            b.metrics = Some((&MetricResult::from_outcomes(outs)).into());
        }
    }

    pub const CSV_HEADER: &'static str = "scope,variant,seed,batch_size,n_edits,efficacy,generalization,specificity";

    /// One aggregate row followed by one row per batch, with header.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        let mut row = |scope: &str, n: usize, m: &Option<MetricSummary>| {
            let (e, g, p) = match m {
                Some(m) => (format!("{:.4}", m.efficacy), fmt_opt(m.generalization), fmt_opt(m.specificity)),
                None => ("skipped".into(), "skipped".into(), "skipped".into()),
            };
            let _ = writeln!(s, "{scope},{},{},{},{n},{e},{g},{p}", self.variant, self.seed, self.batch_size);
        };
        row("all", self.n_edits, &self.metrics);
        for b in &self.batches {
            row(&format!("batch{}", b.index), b.n_instances, &b.metrics);
        }
        s
    }
}
