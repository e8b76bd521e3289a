use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperNetConfig {
    pub rank: usize,
    pub hidden_width: usize,
    pub n_blocks: usize,
    /// Scale of the output factor at initialization; 0 gives an exact identity.
    pub init_scale: f64,
    pub lr: f64,
    pub steps: usize,
    /// Edits sampled per training step.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
    /// Nonlinearity between the low-rank factors.
    #[serde(default)]
    pub activation: Activation,
    /// Initial `log λ` for every layer.
    #[serde(default)]
    pub init_log_lambda: f64,
    /// Initial `log η` for every layer.
    #[serde(default = "default_log_eta")]
    pub init_log_eta: f64,
}

fn default_batch() -> usize {
    10
}

fn default_log_eta() -> f64 {
    (1e-2f64).ln()
}

impl Default for HyperNetConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            hidden_width: 32,
            n_blocks: 2,
            init_scale: 1e-2,
            lr: 1e-2,
            steps: 600,
            batch_size: 10,
            seed: 7,
            activation: Activation::Tanh,
            init_log_lambda: 0.0,
            init_log_eta: default_log_eta(),
        }
    }
}

impl HyperNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EditError::Config(format!("hypernetwork config: {m}")));
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if self.hidden_width == 0 {
            return bad("hidden_width must be at least 1");
        }
        if self.n_blocks != 2 {
            return bad("n_blocks must be 2");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive and finite");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !self.init_log_lambda.is_finite() || !self.init_log_eta.is_finite() {
            return bad("initial log-parameters must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

/// `y = z + U₁ U₂ act(V₂ V₁ z + b₁) + b₂`, applied column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// `rank × D`
    pub v1: DMatrix<f64>,
    /// `hidden × rank`
    pub v2: DMatrix<f64>,
    /// `hidden × 1`
    pub b1: DMatrix<f64>,
    /// `rank × hidden`
    pub u2: DMatrix<f64>,
    /// `D × rank`
    pub u1: DMatrix<f64>,
    /// `D × 1`
    pub b2: DMatrix<f64>,
}

pub(crate) struct BlockCache {
    z: DMatrix<f64>,
    a: DMatrix<f64>,
    s: DMatrix<f64>,
    c: DMatrix<f64>,
}

fn add_col(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        col += b.column(0);
    }
}

fn row_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), 1);
    for col in m.column_iter() {
        let mut o = out.column_mut(0);
        o += col;
    }
    out
}

impl Block {
    fn forward(&self, z: &DMatrix<f64>) -> (DMatrix<f64>, BlockCache) {
        let a = &self.v1 * z;
        let mut b = &self.v2 * &a;
        add_col(&mut b, &self.b1);
        let s = b.map(f64::tanh);
        let c = &self.u2 * &s;
        let mut y = z + &self.u1 * &c;
        add_col(&mut y, &self.b2);
        (y, BlockCache { z: z.clone(), a, s, c })
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dz`.
    fn backward(&self, dy: &DMatrix<f64>, cache: &BlockCache, g: &mut Block) -> DMatrix<f64> {
        g.u1 += dy * cache.c.transpose();
        g.b2 += row_sums(dy);
        let dc = self.u1.tr_mul(dy);
        g.u2 += &dc * cache.s.transpose();
        let mut db = self.u2.tr_mul(&dc);
        db.zip_apply(&cache.s, |d, s| *d *= 1.0 - s * s);
        g.v2 += &db * cache.a.transpose();
        g.b1 += row_sums(&db);
        let da = self.v2.tr_mul(&db);
        g.v1 += &da * cache.z.transpose();
        dy + self.v1.tr_mul(&da)
    }

    fn zeros_like(&self) -> Block {
        let z = |m: &DMatrix<f64>| DMatrix::zeros(m.nrows(), m.ncols());
        Block { v1: z(&self.v1), v2: z(&self.v2), b1: z(&self.b1), u2: z(&self.u2), u1: z(&self.u1), b2: z(&self.b2) }
    }
}

/// Trainable parameters; also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub blocks: Vec<Block>,
    /// One `log λ` per editable layer (`T × 1`).
    pub log_lambda: DMatrix<f64>,
    /// One `log η` per editable layer (`T × 1`).
    pub log_eta: DMatrix<f64>,
}

impl HyperParams {
    pub fn zeros_like(&self) -> HyperParams {
        HyperParams {
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            log_lambda: DMatrix::zeros(self.log_lambda.nrows(), 1),
            log_eta: DMatrix::zeros(self.log_eta.nrows(), 1),
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = Vec::new();
        for (k, b) in self.blocks.iter().enumerate() {
            for (n, m) in [("v1", &b.v1), ("v2", &b.v2), ("b1", &b.b1), ("u2", &b.u2), ("u1", &b.u1), ("b2", &b.b2)] {
                out.push((format!("block{k}.{n}"), m));
            }
        }
        out.push(("log_lambda".into(), &self.log_lambda));
        out.push(("log_eta".into(), &self.log_eta));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut DMatrix<f64>)> {
        let mut out = Vec::new();
        for (k, b) in self.blocks.iter_mut().enumerate() {
            let Block { v1, v2, b1, u2, u1, b2 } = b;
            for (n, m) in [("v1", v1), ("v2", v2), ("b1", b1), ("u2", u2), ("u1", u1), ("b2", b2)] {
                out.push((format!("block{k}.{n}"), m));
            }
        }
        out.push(("log_lambda".into(), &mut self.log_lambda));
        out.push(("log_eta".into(), &mut self.log_eta));
        out
    }

    pub fn norm_squared(&self) -> f64 {
        self.tensors().iter().map(|(_, m)| m.norm_squared()).sum()
    }

    pub fn add_scaled(&mut self, other: &HyperParams, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b * scale;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }
}

/// The shared refinement network plus per-layer `log λ` and `log η`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNet {
    pub config: HyperNetConfig,
    /// Editable layers served, in order.
    pub layers: Vec<usize>,
    /// Width of `H` (the editable matrix fan-in).
    pub d_in: usize,
    /// Width of `G` (the editable matrix fan-out).
    pub d_out: usize,
    /// Per-layer normalization of `H` and `G` before the network. Fixed
    /// constants, not trained.
    pub scale_h: Vec<f64>,
    pub scale_g: Vec<f64>,
    pub params: HyperParams,
}

impl HyperNet {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: &HyperNetConfig, layers: &[usize], d_in: usize, d_out: usize) -> Result<HyperNet> {
        config.validate()?;
        if layers.is_empty() {
            return Err(EditError::Config("hypernetwork needs at least one editable layer".into()));
        }
        let dim = d_in + d_out;
        let (r, hw) = (config.rank, config.hidden_width);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, 1.0).expect("unit normal");
            DMatrix::from_fn(rows, cols, |_, _| std * dist.sample(&mut rng))
        };
        let blocks = (0..config.n_blocks)
            .map(|_| Block {
                v1: gauss(r, dim, 1.0 / (dim as f64).sqrt()),
                v2: gauss(hw, r, 1.0 / (r as f64).sqrt()),
                b1: DMatrix::zeros(hw, 1),
                u2: gauss(r, hw, 1.0 / (hw as f64).sqrt()),
                u1: gauss(dim, r, config.init_scale / (r as f64).sqrt()),
                b2: DMatrix::zeros(dim, 1),
            })
            .collect();
        let t = layers.len();
        Ok(HyperNet {
            config: config.clone(),
            layers: layers.to_vec(),
            d_in,
            d_out,
            scale_h: vec![1.0; t],
            scale_g: vec![1.0; t],
            params: HyperParams {
                blocks,
                log_lambda: DMatrix::from_element(t, 1, config.init_log_lambda),
                log_eta: DMatrix::from_element(t, 1, config.init_log_eta),
            },
        })
    }

    pub fn lambda(&self, slot: usize) -> f64 {
        self.params.log_lambda[slot].exp()
    }

    pub fn eta(&self, slot: usize) -> f64 {
        self.params.log_eta[slot].exp()
    }

    pub fn log_lambdas(&self) -> Vec<f64> {
        self.params.log_lambda.iter().copied().collect()
    }

    pub(crate) fn check_io(&self, h: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<()> {
        if h.ncols() != g.ncols() {
            return Err(EditError::Input(format!("H has {} columns but G has {}", h.ncols(), g.ncols())));
        }
        if h.nrows() != self.d_in || g.nrows() != self.d_out {
            return Err(EditError::Input(format!(
                "hypernetwork expects {}-row H and {}-row G, got {} and {}",
                self.d_in,
                self.d_out,
                h.nrows(),
                g.nrows()
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, slot: usize, h: &DMatrix<f64>, g: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, Vec<BlockCache>) {
        let (sh, sg) = (self.scale_h[slot], self.scale_g[slot]);
        let n = h.ncols();
        let mut z = DMatrix::zeros(self.d_in + self.d_out, n);
        z.rows_mut(0, self.d_in).copy_from(&(h / sh));
        z.rows_mut(self.d_in, self.d_out).copy_from(&(g / sg));
        let z0 = z.clone();
        let mut caches = Vec::with_capacity(self.params.blocks.len());
        for b in &self.params.blocks {
            let (y, c) = b.forward(&z);
            caches.push(c);
            z = y;
        }
        let corr = z - z0;
        let h_t = h + corr.rows(0, self.d_in) * sh;
        let g_t = g + corr.rows(self.d_in, self.d_out) * sg;
        (h_t, g_t, caches)
    }

    /// Accumulates parameter gradients for one layer given `dL/dH̃`, `dL/dG̃`.
    pub(crate) fn backward(&self, slot: usize, dh_t: &DMatrix<f64>, dg_t: &DMatrix<f64>, caches: &[BlockCache], grads: &mut HyperParams) {
        let n = dh_t.ncols();
        let mut dz = DMatrix::zeros(self.d_in + self.d_out, n);
        dz.rows_mut(0, self.d_in).copy_from(&(dh_t * self.scale_h[slot]));
        dz.rows_mut(self.d_in, self.d_out).copy_from(&(dg_t * self.scale_g[slot]));
        for (k, b) in self.params.blocks.iter().enumerate().rev() {
            dz = b.backward(&dz, &caches[k], &mut grads.blocks[k]);
        }
    }
}

/// Refined `(H̃, G̃)` for editable-layer slot `slot`.
pub fn hyper_forward(net: &HyperNet, slot: usize, h: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if slot >= net.layers.len() {
        return Err(EditError::Input(format!("layer slot {slot} out of range")));
    }
    net.check_io(h, g)?;
    let (h_t, g_t, _) = net.forward_cached(slot, h, g);
    Ok((h_t, g_t))
}
