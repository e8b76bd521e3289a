//! Packed forward and backward passes.
//!
//! A chunk of sequences is packed into one `d × N` matrix whose columns are
//! token positions; attention runs per sequence segment, everything else is a
//! single matrix product over the packed columns.

use nalgebra::{DMatrix, DVector};

use super::{LayerWeights, Model, Weights};

const LN_EPS: f64 = 1e-5;
/// MLP activation. Zero-centred keys keep distinct facts' hidden states
/// closer to orthogonal than a one-sided activation would.
pub(crate) fn mlp_act(x: f64) -> f64 {
    x.tanh()
}

pub(crate) fn mlp_act_grad(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

/// One training or probing sequence.
#[derive(Debug, Clone)]
pub(crate) struct Example {
    pub tokens: Vec<usize>,
    /// (position, token) pairs scored by cross-entropy.
    pub targets: Vec<(usize, usize)>,
    pub weight: f64,
    /// Position whose MLP activation and output gradient are captured.
    pub label: usize,
    /// Added to the perturbed layer's MLP output at `label`.
    pub delta: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GradMode {
    None,
    Editable,
    All,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PassOptions {
    pub grads: GradMode,
    pub perturb_layer: Option<usize>,
    pub capture: bool,
}

impl PassOptions {
    pub fn loss_only() -> Self {
        Self { grads: GradMode::None, perturb_layer: None, capture: false }
    }
}

/// Result of a forward (and optionally backward) pass over examples.
#[derive(Debug, Clone)]
pub(crate) struct Pass {
    /// Σ weight · cross-entropy.
    pub loss: f64,
    pub grads: Option<Weights>,
    /// Per layer, `d_ff × n` MLP activations at each example's label position.
    pub hidden: Vec<DMatrix<f64>>,
    /// Per layer, `d × n` loss gradients w.r.t. the MLP output at the label position.
    pub out_grad: Vec<DMatrix<f64>>,
    /// Per layer, `d × n` editable-matrix outputs (without bias) at the label position.
    pub editable_out: Vec<DMatrix<f64>>,
    /// Per layer, `d × n` residual stream after the layer at the label position.
    pub stream: Vec<DMatrix<f64>>,
}

struct LnCache {
    xhat: DMatrix<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    u1: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: Vec<Vec<f64>>,
    att: DMatrix<f64>,
    ln2: LnCache,
    u2: DMatrix<f64>,
    a1: DMatrix<f64>,
    h: DMatrix<f64>,
}

struct Packed {
    segments: Vec<(usize, usize)>,
    tokens: Vec<usize>,
    positions: Vec<usize>,
}

impl Packed {
    fn new<'a>(seqs: impl Iterator<Item = &'a [usize]>) -> Self {
        let mut segments = Vec::new();
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        for s in seqs {
            segments.push((tokens.len(), s.len()));
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        Self { segments, tokens, positions }
    }

    fn len(&self) -> usize {
        self.tokens.len()
    }
}

fn layer_norm(x: &DMatrix<f64>, gain: &DMatrix<f64>, bias: &DMatrix<f64>) -> (DMatrix<f64>, LnCache) {
    let (d, n) = x.shape();
    let mut xhat = DMatrix::zeros(d, n);
    let mut y = DMatrix::zeros(d, n);
    let mut rstd = Vec::with_capacity(n);
    let g = gain.as_slice();
    let b = bias.as_slice();
    for c in 0..n {
        let col = &x.as_slice()[c * d..(c + 1) * d];
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        let xh = &mut xhat.as_mut_slice()[c * d..(c + 1) * d];
        for i in 0..d {
            xh[i] = (col[i] - mean) * r;
        }
        let yc = &mut y.as_mut_slice()[c * d..(c + 1) * d];
        for i in 0..d {
            yc[i] = g[i] * xh[i] + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates gain/bias gradients when given.
fn layer_norm_backward(
    dy: &DMatrix<f64>,
    cache: &LnCache,
    gain: &DMatrix<f64>,
    grads: Option<(&mut DMatrix<f64>, &mut DMatrix<f64>)>,
) -> DMatrix<f64> {
    let (d, n) = dy.shape();
    let g = gain.as_slice();
    let mut dx = DMatrix::zeros(d, n);
    let mut dxhat = vec![0.0; d];
    for c in 0..n {
        let dyc = &dy.as_slice()[c * d..(c + 1) * d];
        let xh = &cache.xhat.as_slice()[c * d..(c + 1) * d];
        for i in 0..d {
            dxhat[i] = dyc[i] * g[i];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = cache.rstd[c];
        let dxc = &mut dx.as_mut_slice()[c * d..(c + 1) * d];
        for i in 0..d {
            dxc[i] = r * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
    if let Some((dg, db)) = grads {
        let dgs = dg.as_mut_slice();
        let dbs = db.as_mut_slice();
        for c in 0..n {
            let dyc = &dy.as_slice()[c * d..(c + 1) * d];
            let xh = &cache.xhat.as_slice()[c * d..(c + 1) * d];
            for i in 0..d {
                dgs[i] += dyc[i] * xh[i];
                dbs[i] += dyc[i];
            }
        }
    }
    dx
}

fn add_bias(y: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    let d = y.nrows();
    let bs = b.as_slice();
    for col in y.as_mut_slice().chunks_mut(d) {
        for (v, bb) in col.iter_mut().zip(bs) {
            *v += bb;
        }
    }
}

fn accumulate_row_sums(db: &mut DMatrix<f64>, dy: &DMatrix<f64>) {
    let d = dy.nrows();
    let dbs = db.as_mut_slice();
    for col in dy.as_slice().chunks(d) {
        for (acc, v) in dbs.iter_mut().zip(col) {
            *acc += v;
        }
    }
}

/// dW += dy · xᵀ
fn accumulate_outer(dw: &mut DMatrix<f64>, dy: &DMatrix<f64>, x: &DMatrix<f64>) {
    dw.gemm(1.0, dy, &x.transpose(), 1.0);
}

fn attention_forward(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    segments: &[(usize, usize)],
    n_heads: usize,
) -> (DMatrix<f64>, Vec<Vec<f64>>) {
    let (d, n) = q.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qs, ks, vs) = (q.as_slice(), k.as_slice(), v.as_slice());
    let mut att = DMatrix::zeros(d, n);
    let mut probs = Vec::with_capacity(segments.len() * n_heads);
    for &(start, len) in segments {
        for h in 0..n_heads {
            let off = h * dh;
            let mut p = vec![0.0; len * len];
            for t in 0..len {
                let qt = &qs[(start + t) * d + off..][..dh];
                let row = &mut p[t * len..t * len + len];
                let mut max = f64::NEG_INFINITY;
                for u in 0..=t {
                    let ku = &ks[(start + u) * d + off..][..dh];
                    let s = qt.iter().zip(ku).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[u] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for r in row.iter_mut().take(t + 1) {
                    *r = (*r - max).exp();
                    z += *r;
                }
                for r in row.iter_mut().take(t + 1) {
                    *r /= z;
                }
                let out = &mut att.as_mut_slice()[(start + t) * d + off..][..dh];
                for u in 0..=t {
                    let vu = &vs[(start + u) * d + off..][..dh];
                    let w = row[u];
                    for (o, x) in out.iter_mut().zip(vu) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
    }
    (att, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    datt: &DMatrix<f64>,
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    probs: &[Vec<f64>],
    segments: &[(usize, usize)],
    n_heads: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (d, n) = q.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qs, ks, vs, das) = (q.as_slice(), k.as_slice(), v.as_slice(), datt.as_slice());
    let mut dq = DMatrix::zeros(d, n);
    let mut dk = DMatrix::zeros(d, n);
    let mut dv = DMatrix::zeros(d, n);
    let mut dp = Vec::new();
    for (si, &(start, len)) in segments.iter().enumerate() {
        for h in 0..n_heads {
            let off = h * dh;
            let p = &probs[si * n_heads + h];
            for t in 0..len {
                let dout = &das[(start + t) * d + off..][..dh];
                let row = &p[t * len..t * len + len];
                dp.clear();
                for u in 0..=t {
                    let vu = &vs[(start + u) * d + off..][..dh];
                    dp.push(dout.iter().zip(vu).map(|(a, b)| a * b).sum::<f64>());
                    let dvu = &mut dv.as_mut_slice()[(start + u) * d + off..][..dh];
                    for (acc, g) in dvu.iter_mut().zip(dout) {
                        *acc += row[u] * g;
                    }
                }
                let dot: f64 = (0..=t).map(|u| row[u] * dp[u]).sum();
                for u in 0..=t {
                    let ds = row[u] * (dp[u] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ku = &ks[(start + u) * d + off..][..dh];
                    let dqt = &mut dq.as_mut_slice()[(start + t) * d + off..][..dh];
                    for (acc, x) in dqt.iter_mut().zip(ku) {
                        *acc += ds * x;
                    }
                    let qt = &qs[(start + t) * d + off..][..dh];
                    let dku = &mut dk.as_mut_slice()[(start + u) * d + off..][..dh];
                    for (acc, x) in dku.iter_mut().zip(qt) {
                        *acc += ds * x;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

struct Forward {
    packed: Packed,
    caches: Vec<LayerCache>,
    lnf: LnCache,
    uf: DMatrix<f64>,
    label_cols: Vec<usize>,
    editable_out: Vec<DMatrix<f64>>,
    stream: Vec<DMatrix<f64>>,
}

fn forward_packed(model: &Model, examples: &[Example], opts: &PassOptions) -> Forward {
    let w = &model.weights;
    let cfg = &model.config;
    let d = cfg.d_model;
    let packed = Packed::new(examples.iter().map(|e| e.tokens.as_slice()));
    let n = packed.len();
    let mut x = DMatrix::zeros(d, n);
    for c in 0..n {
        let te = &w.token_emb.as_slice()[packed.tokens[c] * d..][..d];
        let pe = &w.pos_emb.as_slice()[packed.positions[c] * d..][..d];
        let xc = &mut x.as_mut_slice()[c * d..(c + 1) * d];
        for i in 0..d {
            xc[i] = te[i] + pe[i];
        }
    }
    let label_cols: Vec<usize> = examples
        .iter()
        .zip(&packed.segments)
        .map(|(e, &(start, _))| start + e.label)
        .collect();

    let mut caches = Vec::with_capacity(cfg.n_layers);
    let mut editable_out = Vec::new();
    let mut stream = Vec::new();
    for (li, lw) in w.layers.iter().enumerate() {
        let (u1, ln1) = layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias);
        let q = &lw.wq * &u1;
        let k = &lw.wk * &u1;
        let v = &lw.wv * &u1;
        let (att, probs) = attention_forward(&q, &k, &v, &packed.segments, cfg.n_heads);
        x += &lw.wo * &att;
        let (u2, ln2) = layer_norm(&x, &lw.ln2_gain, &lw.ln2_bias);
        let mut a1 = &lw.w_in * &u2;
        add_bias(&mut a1, &lw.b_in);
        let h = a1.map(mlp_act);
        let mut m = &lw.w_out * &h;
        if opts.capture {
            let mut out = DMatrix::zeros(d, examples.len());
            for (i, &c) in label_cols.iter().enumerate() {
                out.set_column(i, &m.column(c));
            }
            editable_out.push(out);
        }
        add_bias(&mut m, &lw.b_out);
        if opts.perturb_layer == Some(li) {
            for (e, &c) in examples.iter().zip(&label_cols) {
                if let Some(delta) = &e.delta {
                    let mut col = m.column_mut(c);
                    col += delta;
                }
            }
        }
        x += &m;
        if opts.capture {
            let mut out = DMatrix::zeros(d, examples.len());
            for (i, &c) in label_cols.iter().enumerate() {
                out.set_column(i, &x.column(c));
            }
            stream.push(out);
        }
        caches.push(LayerCache { ln1, u1, q, k, v, probs, att, ln2, u2, a1, h });
    }
    let (uf, lnf) = layer_norm(&x, &w.lnf_gain, &w.lnf_bias);
    Forward { packed, caches, lnf, uf, label_cols, editable_out, stream }
}

fn log_softmax_col(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Logits for every position of one sequence, `vocab × len`.
pub(crate) fn sequence_logits(model: &Model, tokens: &[usize]) -> DMatrix<f64> {
    let ex = Example {
        tokens: tokens.to_vec(),
        targets: Vec::new(),
        weight: 0.0,
        label: 0,
        delta: None,
    };
    let fwd = forward_packed(model, std::slice::from_ref(&ex), &PassOptions::loss_only());
    &model.weights.unembed * &fwd.uf
}

/// Per-example, per-layer MLP activations over all positions.
pub(crate) fn trace_activations(model: &Model, examples: &[Example]) -> Vec<Vec<DMatrix<f64>>> {
    let fwd = forward_packed(model, examples, &PassOptions::loss_only());
    fwd.packed
        .segments
        .iter()
        .map(|&(start, len)| fwd.caches.iter().map(|c| c.h.columns(start, len).into_owned()).collect())
        .collect()
}

/// Forward + backward over one chunk of examples.
pub(crate) fn run(model: &Model, examples: &[Example], opts: &PassOptions) -> Pass {
    let cfg = &model.config;
    let w = &model.weights;
    let d = cfg.d_model;
    let fwd = forward_packed(model, examples, opts);
    let n = fwd.packed.len();

    // Gather scored positions.
    let mut cols = Vec::new();
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    for (e, &(start, _)) in examples.iter().zip(&fwd.packed.segments) {
        for &(pos, tok) in &e.targets {
            cols.push(start + pos);
            labels.push(tok);
            weights.push(e.weight);
        }
    }
    let mut uf_t = DMatrix::zeros(d, cols.len());
    for (j, &c) in cols.iter().enumerate() {
        uf_t.set_column(j, &fwd.uf.column(c));
    }
    let logits = &w.unembed * &uf_t;
    let v = logits.nrows();
    let mut loss = 0.0;
    let mut dlogits = DMatrix::zeros(v, cols.len());
    for j in 0..cols.len() {
        let ls = log_softmax_col(&logits.as_slice()[j * v..(j + 1) * v]);
        loss += -weights[j] * ls[labels[j]];
        let dz = &mut dlogits.as_mut_slice()[j * v..(j + 1) * v];
        for t in 0..v {
            dz[t] = weights[j] * ls[t].exp();
        }
        dz[labels[j]] -= weights[j];
    }

    let backward = opts.grads != GradMode::None || opts.capture;
    let n_ex = examples.len();
    if !backward {
        return Pass {
            loss,
            grads: None,
            hidden: Vec::new(),
            out_grad: Vec::new(),
            editable_out: Vec::new(),
            stream: Vec::new(),
        };
    }
    let all = opts.grads == GradMode::All;
    let mut g = if opts.grads != GradMode::None { Some(Weights::zeros_like(w)) } else { None };

    let mut duf = DMatrix::zeros(d, n);
    let duf_t = w.unembed.transpose() * &dlogits;
    for (j, &c) in cols.iter().enumerate() {
        let mut col = duf.column_mut(c);
        col += duf_t.column(j);
    }
    if all {
        let g = g.as_mut().unwrap();
        accumulate_outer(&mut g.unembed, &dlogits, &uf_t);
    }
    let mut dx = match (all, g.as_mut()) {
        (true, Some(g)) => layer_norm_backward(&duf, &fwd.lnf, &w.lnf_gain, Some((&mut g.lnf_gain, &mut g.lnf_bias))),
        _ => layer_norm_backward(&duf, &fwd.lnf, &w.lnf_gain, None),
    };

    let mut hidden = Vec::new();
    let mut out_grad = Vec::new();
    for li in (0..cfg.n_layers).rev() {
        let lw: &LayerWeights = &w.layers[li];
        let c = &fwd.caches[li];
        // MLP
        let dm = &dx;
        if opts.capture {
            let mut hc = DMatrix::zeros(cfg.d_ff, n_ex);
            let mut gc = DMatrix::zeros(d, n_ex);
            for (i, &col) in fwd.label_cols.iter().enumerate() {
                hc.set_column(i, &c.h.column(col));
                gc.set_column(i, &dm.column(col));
            }
            hidden.push(hc);
            out_grad.push(gc);
        }
        let is_editable = cfg.editable_layers.contains(&li);
        if let Some(g) = g.as_mut() {
            if all || is_editable {
                accumulate_outer(&mut g.layers[li].w_out, dm, &c.h);
            }
            if all {
                accumulate_row_sums(&mut g.layers[li].b_out, dm);
            }
        }
        let mut da1 = lw.w_out.transpose() * dm;
        da1.zip_apply(&c.a1, |g, a| *g *= mlp_act_grad(a));
        if all {
            let gl = &mut g.as_mut().unwrap().layers[li];
            accumulate_outer(&mut gl.w_in, &da1, &c.u2);
            accumulate_row_sums(&mut gl.b_in, &da1);
        }
        let du2 = lw.w_in.transpose() * &da1;
        let dx2 = if all {
            let gl = &mut g.as_mut().unwrap().layers[li];
            layer_norm_backward(&du2, &c.ln2, &lw.ln2_gain, Some((&mut gl.ln2_gain, &mut gl.ln2_bias)))
        } else {
            layer_norm_backward(&du2, &c.ln2, &lw.ln2_gain, None)
        };
        dx += &dx2;

        // Attention
        let datt = lw.wo.transpose() * &dx;
        if all {
            let gl = &mut g.as_mut().unwrap().layers[li];
            accumulate_outer(&mut gl.wo, &dx, &c.att);
        }
        let (dq, dk, dv) = attention_backward(&datt, &c.q, &c.k, &c.v, &c.probs, &fwd.packed.segments, cfg.n_heads);
        if all {
            let gl = &mut g.as_mut().unwrap().layers[li];
            accumulate_outer(&mut gl.wq, &dq, &c.u1);
            accumulate_outer(&mut gl.wk, &dk, &c.u1);
            accumulate_outer(&mut gl.wv, &dv, &c.u1);
        }
        let mut du1 = lw.wq.transpose() * &dq;
        du1.gemm(1.0, &lw.wk.transpose(), &dk, 1.0);
        du1.gemm(1.0, &lw.wv.transpose(), &dv, 1.0);
        let dx1 = if all {
            let gl = &mut g.as_mut().unwrap().layers[li];
            layer_norm_backward(&du1, &c.ln1, &lw.ln1_gain, Some((&mut gl.ln1_gain, &mut gl.ln1_bias)))
        } else {
            layer_norm_backward(&du1, &c.ln1, &lw.ln1_gain, None)
        };
        dx += &dx1;
    }
    if all {
        let g = g.as_mut().unwrap();
        for c in 0..n {
            let dxc = &dx.as_slice()[c * d..(c + 1) * d];
            let te = &mut g.token_emb.as_mut_slice()[fwd.packed.tokens[c] * d..][..d];
            for (a, b) in te.iter_mut().zip(dxc) {
                *a += b;
            }
            let pe = &mut g.pos_emb.as_mut_slice()[fwd.packed.positions[c] * d..][..d];
            for (a, b) in pe.iter_mut().zip(dxc) {
                *a += b;
            }
        }
    }
    hidden.reverse();
    out_grad.reverse();
    Pass { loss, grads: g, hidden, out_grad, editable_out: fwd.editable_out, stream: fwd.stream }
}

/// Sequences per chunk. Fixed so that results do not depend on thread count.
pub(crate) const CHUNK: usize = 32;

/// Runs `run` over fixed chunks in parallel and merges in order.
pub(crate) fn run_batched(model: &Model, examples: &[Example], opts: &PassOptions) -> Pass {
    if examples.len() <= CHUNK {
        return run(model, examples, opts);
    }
    let parts = crate::par::map_chunks(examples, CHUNK, |c| run(model, c, opts));
    let mut iter = parts.into_iter();
    let mut acc = iter.next().expect("non-empty");
    for p in iter {
        acc.loss += p.loss;
        if let (Some(a), Some(b)) = (acc.grads.as_mut(), p.grads.as_ref()) {
            a.add_scaled(b, 1.0);
        }
        for (a, b) in acc.hidden.iter_mut().zip(&p.hidden) {
            *a = hcat(a, b);
        }
        for (a, b) in acc.out_grad.iter_mut().zip(&p.out_grad) {
            *a = hcat(a, b);
        }
        for (a, b) in acc.editable_out.iter_mut().zip(&p.editable_out) {
            *a = hcat(a, b);
        }
        for (a, b) in acc.stream.iter_mut().zip(&p.stream) {
            *a = hcat(a, b);
        }
    }
    acc
}

pub(crate) fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.as_slice());
    data.extend_from_slice(b.as_slice());
    DMatrix::from_vec(a.nrows(), a.ncols() + b.ncols(), data)
}
