use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_horse, HorseBatch, LossOptions};
use super::net::{HyperNet, HyperNetConfig};
use crate::checkpoint::{canonical_json, parse_config, read_container, write_container, TensorEntry, HYPER_MAGIC};
use crate::error::{EditError, Result};
use crate::model::{collect_hooks, greedy_labels, HookRecord, Instance, Model};
use crate::pipeline::EditInstance;

/// Gradient norm above which updates are rescaled.
pub const CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub ce_term: f64,
    pub trace_term: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// `e^{log λ}` per editable layer.
    pub lambda: Vec<f64>,
    /// `e^{log η}` per editable layer.
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub layers: Vec<usize>,
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,ce_term,trace_term,grad_norm");
        for l in &self.layers {
            let _ = write!(s, ",lambda_{l}");
        }
        for l in &self.layers {
            let _ = write!(s, ",eta_{l}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{:e},{:e},{:e}", r.step, r.ce_term, r.trace_term, r.grad_norm);
            for v in r.lambda.iter().chain(&r.eta) {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Hook columns and preservation labels for every training edit, computed
/// once against the base model.
pub struct PreparedPool {
    pub hooks: Vec<HookRecord>,
    pub edits: Vec<Instance>,
    pub equivalents: Vec<Vec<Instance>>,
    pub unrelated: Vec<Vec<Instance>>,
}

impl PreparedPool {
    pub fn new(model: &Model, dataset: &[EditInstance]) -> Result<PreparedPool> {
        if dataset.is_empty() {
            return Err(EditError::Input("empty hypernetwork training set".into()));
        }
        let edits: Vec<Instance> = dataset.iter().map(|e| e.edit.clone()).collect();
        let hooks = collect_hooks(model, &edits, &[], &[])?;
        let mut unrelated = Vec::with_capacity(dataset.len());
        for e in dataset {
            for q in &e.equivalents {
                q.validate(model.config())?;
            }
            unrelated.push(greedy_labels(model, &e.unrelated)?);
        }
        Ok(PreparedPool {
            hooks,
            edits,
            equivalents: dataset.iter().map(|e| e.equivalents.clone()).collect(),
            unrelated,
        })
    }

    pub fn len(&self) -> usize {
        self.edits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    /// Batch made of the listed pool entries, in order.
    pub fn batch(&self, idx: &[usize]) -> HorseBatch {
        let cols = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])]);
        HorseBatch {
            hooks: self
                .hooks
                .iter()
                .map(|h| HookRecord { layer: h.layer, h: cols(&h.h), g: cols(&h.g) })
                .collect(),
            edit: idx.iter().map(|&i| self.edits[i].clone()).collect(),
            equivalents: idx.iter().flat_map(|&i| self.equivalents[i].iter().cloned()).collect(),
            unrelated: idx.iter().flat_map(|&i| self.unrelated[i].iter().cloned()).collect(),
        }
    }

    fn rms(m: &DMatrix<f64>) -> f64 {
        let v = (m.norm_squared() / m.len().max(1) as f64).sqrt();
        if v > 0.0 && v.is_finite() {
            v
        } else {
            1.0
        }
    }

    /// Sets the network's per-layer input normalization from the pool.
    pub fn fit_scales(&self, net: &mut HyperNet) {
        net.scale_h = self.hooks.iter().map(|h| Self::rms(&h.h)).collect();
        net.scale_g = self.hooks.iter().map(|h| Self::rms(&h.g)).collect();
    }
}

fn divergence(step: usize, what: &str) -> EditError {
    EditError::Divergence { step, detail: format!("non-finite {what}") }
}

/// Gradient descent with norm clipping on the network and the per-layer
/// `log λ`, `log η`. Hooks come from the unedited `model`.
pub fn train_hypernetwork(
    model: &Model,
    dataset: &[EditInstance],
    config: &HyperNetConfig,
    opts: &LossOptions,
) -> Result<(HyperNet, TrainLog)> {
    config.validate()?;
    let cfg = model.config();
    let mut net = HyperNet::new(config, model.editable_layers(), cfg.d_ff, cfg.d_model)?;
    let mut log = TrainLog { layers: net.layers.clone(), rows: Vec::new() };
    if config.steps == 0 {
        return Ok((net, log));
    }
    let pool = PreparedPool::new(model, dataset)?;
    pool.fit_scales(&mut net);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let take = config.batch_size.min(pool.len());
    for step in 0..config.steps {
        let idx = rand::seq::index::sample(&mut rng, pool.len(), take).into_vec();
        let batch = pool.batch(&idx);
        let loss = loss_horse(model, &net, &batch, opts).map_err(|e| match e {
            EditError::Numerical(m) | EditError::Input(m) if m.contains("non-finite") => divergence(step, "ce_term"),
            other => other,
        })?;
        if !loss.ce.is_finite() {
            return Err(divergence(step, "ce_term"));
        }
        if !loss.trace.is_finite() {
            return Err(divergence(step, "trace_term"));
        }
        let grad_norm = loss.grads.norm_squared().sqrt();
        if !grad_norm.is_finite() {
            return Err(divergence(step, "gradient"));
        }
        log.rows.push(TrainLogRow {
            step,
            ce_term: loss.ce,
            trace_term: loss.trace,
            total: loss.total,
            grad_norm,
            lambda: (0..net.layers.len()).map(|s| net.lambda(s)).collect(),
            eta: (0..net.layers.len()).map(|s| net.eta(s)).collect(),
        });
        let scale = if grad_norm > CLIP_NORM { CLIP_NORM / grad_norm } else { 1.0 };
        net.params.add_scaled(&loss.grads, -config.lr * scale);
        if !net.params.all_finite() {
            return Err(divergence(step, "parameters"));
        }
        for s in 0..net.layers.len() {
            let (l, e) = (net.lambda(s), net.eta(s));
            if !(l > 0.0 && l.is_finite() && e > 0.0 && e.is_finite()) {
                return Err(divergence(step, "lambda or eta"));
            }
        }
        if step % 50 == 0 || step + 1 == config.steps {
            log::info!(
                "hyper step {step}: ce {:.4} trace {:.4} |g| {:.3e}",
                loss.ce,
                loss.trace,
                grad_norm
            );
        }
    }
    Ok((net, log))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HyperHeader {
    config: HyperNetConfig,
    layers: Vec<usize>,
    d_in: usize,
    d_out: usize,
}

impl HyperNet {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let header = HyperHeader {
            config: self.config.clone(),
            layers: self.layers.clone(),
            d_in: self.d_in,
            d_out: self.d_out,
        };
        let mut tensors: Vec<TensorEntry> = self
            .params
            .tensors()
            .into_iter()
            .map(|(n, m)| TensorEntry::from_matrix(&n, m, m.ncols() == 1))
            .collect();
        tensors.push(TensorEntry::from_slice("scale_h", &self.scale_h));
        tensors.push(TensorEntry::from_slice("scale_g", &self.scale_g));
        write_container(w, HYPER_MAGIC, &canonical_json(&header)?, &tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(r: R) -> Result<HyperNet> {
        let (json, tensors) = read_container(r, HYPER_MAGIC)?;
        let header: HyperHeader = parse_config(&json)?;
        let mut net = HyperNet::new(&header.config, &header.layers, header.d_in, header.d_out)?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| EditError::Format(format!("missing tensor {name}")))
        };
        for (name, m) in net.params.tensors_mut() {
            let t = find(&name)?.to_matrix()?;
            if t.shape() != m.shape() {
                return Err(EditError::Format(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), m.shape())));
            }
            *m = t;
        }
        let t = net.layers.len();
        for (name, dst) in [("scale_h", &mut net.scale_h), ("scale_g", &mut net.scale_g)] {
            let v = find(name)?;
            if v.data.len() != t {
                return Err(EditError::Format(format!("tensor {name} has {} entries, expected {t}", v.data.len())));
            }
            *dst = v.data.clone();
        }
        if tensors.len() != net.params.tensors().len() + 2 {
            return Err(EditError::Format("unexpected extra tensors in hypernetwork checkpoint".into()));
        }
        if !net.params.all_finite() {
            return Err(EditError::Format("non-finite hypernetwork parameters".into()));
        }
        Ok(net)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<HyperNet> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<HyperNet> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let cfg = HyperNetConfig { rank: 2, hidden_width: 3, init_scale: 0.3, ..Default::default() };
        let mut net = HyperNet::new(&cfg, &[1, 2], 5, 4).unwrap();
        net.scale_h = vec![0.5, 2.0];
        net.params.log_eta[1] = -1.25;
        let back = HyperNet::from_bytes(&net.to_bytes().unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn rejects_model_checkpoint_magic() {
        let net = HyperNet::new(&HyperNetConfig::default(), &[0], 4, 3).unwrap();
        let mut bytes = net.to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"HEDT");
        assert!(matches!(HyperNet::from_bytes(&bytes), Err(EditError::Format(_))));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let log = TrainLog {
            layers: vec![2, 3],
            rows: vec![TrainLogRow {
                step: 0,
                ce_term: 1.0,
                trace_term: -0.5,
                total: 0.5,
                grad_norm: 2.0,
                lambda: vec![1.0, 1.0],
                eta: vec![0.01, 0.01],
            }],
        };
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,ce_term,trace_term,grad_norm,lambda_2,lambda_3,eta_2,eta_3");
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].split(',').count(), 8);
    }
}
