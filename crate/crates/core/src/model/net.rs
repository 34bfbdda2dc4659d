//! Small block-causal transformer over a flat `f64` parameter vector.
//!
//! Layout per layer: single residual attention sub-layer followed by a
//! residual tanh feed-forward sub-layer, no normalisation. The backward pass
//! is written out by hand; `gradcheck` verifies it against finite differences.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracle::{AttentionView, ModelOracle, ProbGrid, ProbRow};
use crate::error::{Error, Result};
use crate::layout::BlockLayout;
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub layers: usize,
    pub prompt_len: usize,
    pub block_size: usize,
    /// Longest generation region (in blocks) the position table covers.
    pub max_blocks: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 || self.width == 0 || self.ffn_width == 0 {
            return bad("vocab_size, width and ffn_width must be positive");
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad("width must be a positive multiple of heads");
        }
        if self.layers == 0 || self.block_size == 0 || self.max_blocks == 0 {
            return bad("layers, block_size and max_blocks must be positive");
        }
        Ok(())
    }

    pub fn max_positions(&self) -> usize {
        self.prompt_len + self.block_size * self.max_blocks
    }

    pub fn layout(&self, num_blocks: usize) -> BlockLayout {
        BlockLayout {
            prompt_len: self.prompt_len,
            block_size: self.block_size,
            num_blocks,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    w_out: usize,
    b_out: usize,
    total: usize,
}

impl Offsets {
    fn new(cfg: &NetConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.width, cfg.ffn_width);
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let tok = take(v * d);
        let pos = take(cfg.max_positions() * d);
        let layers = (0..cfg.layers)
            .map(|_| LayerOffsets {
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                w1: take(d * f),
                b1: take(f),
                w2: take(f * d),
                b2: take(d),
            })
            .collect();
        let w_out = take(d * v);
        let b_out = take(v);
        Self {
            tok,
            pos,
            layers,
            w_out,
            b_out,
            total: at,
        }
    }
}

/// Boolean attention mask, row = query, column = key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    /// Query `i` attends to key `j` iff `groups[j] <= groups[i]`.
    pub fn from_groups(groups: &[usize]) -> Self {
        let n = groups.len();
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allow[i * n + j] = groups[j] <= groups[i];
            }
        }
        Self { n, allow }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allow[i * n + j] = f(i, j);
            }
        }
        Self { n, allow }
    }

    pub fn for_view(layout: &BlockLayout, view: AttentionView) -> Self {
        let groups: Vec<usize> = (0..layout.total_len()).map(|p| view.group_of(layout, p)).collect();
        Self::from_groups(&groups)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.n + key]
    }
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    h1: Array2<f64>,
    act: Array2<f64>,
}

/// Activations retained by a forward pass for the backward pass.
pub struct ForwardCache {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    layers: Vec<LayerCache>,
    h_final: Array2<f64>,
    pub logits: Array2<f64>,
}

impl ForwardCache {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn probs_row(&self, row: usize) -> Vec<f64> {
        softmax(self.logits.row(row).iter().copied())
    }

    pub fn log_probs_row(&self, row: usize) -> Vec<f64> {
        log_softmax(self.logits.row(row).iter().copied())
    }
}

pub fn softmax(logits: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.clone().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.map(|l| l - lse).collect()
}

#[derive(Debug, Clone)]
pub struct ToyNet {
    pub config: NetConfig,
    pub params: Vec<f64>,
    offsets: Offsets,
}

impl PartialEq for ToyNet {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl ToyNet {
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let offsets = Offsets::new(&config);
        Ok(Self {
            params: vec![0.0; offsets.total],
            offsets,
            config,
        })
    }

    /// Uniform fan-in scaled initialisation, deterministic in `seed`.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = net.offsets().clone();
        let (v, d, f) = (net.config.vocab_size, net.config.width, net.config.ffn_width);
        let mut fill = |params: &mut [f64], start: usize, n: usize, std: f64| {
            let a = std * 3f64.sqrt();
            for p in &mut params[start..start + n] {
                *p = rng.gen_range(-a..a);
            }
        };
        fill(&mut net.params, o.tok, v * d, 0.5);
        fill(&mut net.params, o.pos, net.config.max_positions() * d, 0.5);
        let inv_d = 1.0 / (d as f64).sqrt();
        for l in &o.layers {
            for w in [l.wq, l.wk, l.wv] {
                fill(&mut net.params, w, d * d, inv_d);
            }
            fill(&mut net.params, l.wo, d * d, 0.5 * inv_d);
            fill(&mut net.params, l.w1, d * f, inv_d);
            fill(&mut net.params, l.w2, f * d, 0.5 / (f as f64).sqrt());
        }
        fill(&mut net.params, o.w_out, d * v, 0.5 * inv_d);
        Ok(net)
    }

    /// Rebuilds derived state after deserialisation or a parameter load.
    pub fn from_parts(config: NetConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let offsets = Offsets::new(&config);
        if params.len() != offsets.total {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                offsets.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            params,
            offsets,
        })
    }

    fn offsets(&self) -> &Offsets {
        &self.offsets
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn mat(&self, start: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[start..start + rows * cols]).unwrap()
    }

    fn vec_at(&self, start: usize, n: usize) -> &[f64] {
        &self.params[start..start + n]
    }

    /// Checks `len` against the net's prompt length and block size; returns the block count.
    pub fn layout_for_len(&self, len: usize) -> Result<BlockLayout> {
        let c = &self.config;
        if len < c.prompt_len || (len - c.prompt_len) % c.block_size != 0 {
            return Err(Error::LayoutMismatch(format!(
                "length {len} is not prompt_len {} plus a multiple of block_size {}",
                c.prompt_len, c.block_size
            )));
        }
        let num_blocks = (len - c.prompt_len) / c.block_size;
        if num_blocks == 0 || num_blocks > c.max_blocks {
            return Err(Error::LayoutMismatch(format!(
                "{num_blocks} blocks outside 1..={}",
                c.max_blocks
            )));
        }
        Ok(c.layout(num_blocks))
    }

    pub fn check_layout(&self, layout: &BlockLayout) -> Result<()> {
        let c = &self.config;
        if layout.prompt_len != c.prompt_len || layout.block_size != c.block_size || layout.num_blocks > c.max_blocks {
            return Err(Error::LayoutMismatch(format!(
                "layout {layout:?} incompatible with net (prompt_len {}, block_size {}, max_blocks {})",
                c.prompt_len, c.block_size, c.max_blocks
            )));
        }
        Ok(())
    }

    /// Block-causal forward over a laid-out sequence, returning distributions at `scope`.
    pub fn forward(&self, tokens: &[TokenId], scope: &[usize]) -> Result<ProbGrid> {
        let layout = self.layout_for_len(tokens.len())?;
        self.predict(tokens, &layout, AttentionView::BlockCausal, scope)
    }

    /// Forward pass with explicit position ids and attention mask.
    pub fn forward_raw(&self, tokens: &[TokenId], positions: &[usize], mask: &AttnMask) -> Result<ForwardCache> {
        let c = &self.config;
        let n = tokens.len();
        if positions.len() != n || mask.len() != n {
            return Err(Error::LayoutMismatch("tokens, positions and mask disagree in length".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::InvalidConfig(format!("token {t} outside vocabulary")));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= c.max_positions()) {
            return Err(Error::LayoutMismatch(format!("position {p} beyond table")));
        }
        let o = self.offsets();
        let (d, h) = (c.width, c.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = Array2::<f64>::zeros((n, d));
        for (i, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            let e = self.vec_at(o.tok + t as usize * d, d);
            let pe = self.vec_at(o.pos + p * d, d);
            for k in 0..d {
                x[[i, k]] = e[k] + pe[k];
            }
        }

        let mut layers = Vec::with_capacity(c.layers);
        for lo in &o.layers {
            let q = x.dot(&self.mat(lo.wq, d, d));
            let k = x.dot(&self.mat(lo.wk, d, d));
            let v = x.dot(&self.mat(lo.wv, d, d));
            let mut ctx = Array2::<f64>::zeros((n, d));
            let mut att = Vec::with_capacity(h);
            for head in 0..h {
                let cols = s![.., head * dh..(head + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut a = qh.dot(&kh.t());
                for i in 0..n {
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n {
                        if mask.allows(i, j) {
                            max = max.max(a[[i, j]] * scale);
                        }
                    }
                    let mut sum = 0.0;
                    for j in 0..n {
                        if mask.allows(i, j) {
                            let e = (a[[i, j]] * scale - max).exp();
                            a[[i, j]] = e;
                            sum += e;
                        } else {
                            a[[i, j]] = 0.0;
                        }
                    }
                    if sum > 0.0 {
                        a.row_mut(i).mapv_inplace(|e| e / sum);
                    }
                }
                ctx.slice_mut(cols).assign(&a.dot(&vh));
                att.push(a);
            }
            let h1 = &x + &ctx.dot(&self.mat(lo.wo, d, d));
            let mut u = h1.dot(&self.mat(lo.w1, d, c.ffn_width));
            let b1 = self.vec_at(lo.b1, c.ffn_width);
            for mut row in u.rows_mut() {
                for (val, b) in row.iter_mut().zip(b1) {
                    *val = (*val + b).tanh();
                }
            }
            let act = u;
            let mut out = &h1 + &act.dot(&self.mat(lo.w2, c.ffn_width, d));
            let b2 = self.vec_at(lo.b2, d);
            for mut row in out.rows_mut() {
                for (val, b) in row.iter_mut().zip(b2) {
                    *val += b;
                }
            }
            layers.push(LayerCache {
                x: std::mem::replace(&mut x, out),
                q,
                k,
                v,
                att,
                ctx,
                h1,
                act,
            });
        }

        let mut logits = x.dot(&self.mat(o.w_out, d, c.vocab_size));
        let b_out = self.vec_at(o.b_out, c.vocab_size);
        for mut row in logits.rows_mut() {
            for (val, b) in row.iter_mut().zip(b_out) {
                *val += b;
            }
        }
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            positions: positions.to_vec(),
            layers,
            h_final: x,
            logits,
        })
    }

    /// Gradient of a scalar objective with respect to every parameter, given
    /// the objective's gradient with respect to the cached logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(cache, dlogits, &mut grad);
        grad
    }

    /// Accumulates the gradient into `grad`.
    pub fn backward_into(&self, cache: &ForwardCache, dlogits: &Array2<f64>, grad: &mut [f64]) {
        let c = &self.config;
        let o = self.offsets();
        let (d, f, v) = (c.width, c.ffn_width, c.vocab_size);
        let (h, dh) = (c.heads, c.width / c.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let n = cache.seq_len();

        let add_mat = |grad: &mut [f64], start: usize, rows: usize, cols: usize, m: &Array2<f64>| {
            let mut view = ArrayViewMut2::from_shape((rows, cols), &mut grad[start..start + rows * cols]).unwrap();
            view += m;
        };
        let add_vec = |grad: &mut [f64], start: usize, m: &Array2<f64>| {
            let sums = m.sum_axis(Axis(0));
            for (g, s) in grad[start..start + sums.len()].iter_mut().zip(sums.iter()) {
                *g += s;
            }
        };

        add_mat(grad, o.w_out, d, v, &cache.h_final.t().dot(dlogits));
        add_vec(grad, o.b_out, dlogits);
        let mut dx = dlogits.dot(&self.mat(o.w_out, d, v).t());

        for (lc, lo) in cache.layers.iter().zip(&o.layers).rev() {
            // feed-forward sub-layer
            let dout = dx;
            add_mat(grad, lo.w2, f, d, &lc.act.t().dot(&dout));
            add_vec(grad, lo.b2, &dout);
            let mut du = dout.dot(&self.mat(lo.w2, f, d).t());
            du.zip_mut_with(&lc.act, |g, a| *g *= 1.0 - a * a);
            add_mat(grad, lo.w1, d, f, &lc.h1.t().dot(&du));
            add_vec(grad, lo.b1, &du);
            let dh1 = &dout + &du.dot(&self.mat(lo.w1, d, f).t());

            // attention sub-layer
            add_mat(grad, lo.wo, d, d, &lc.ctx.t().dot(&dh1));
            let dctx = dh1.dot(&self.mat(lo.wo, d, d).t());
            let mut dq = Array2::<f64>::zeros((n, d));
            let mut dk = Array2::<f64>::zeros((n, d));
            let mut dv = Array2::<f64>::zeros((n, d));
            for head in 0..h {
                let cols = s![.., head * dh..(head + 1) * dh];
                let a = &lc.att[head];
                let dctx_h = dctx.slice(cols);
                dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
                let da = dctx_h.dot(&lc.v.slice(cols).t());
                let mut ds = Array2::<f64>::zeros((n, n));
                for i in 0..n {
                    let dot: f64 = (0..n).map(|j| a[[i, j]] * da[[i, j]]).sum();
                    for j in 0..n {
                        ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) * scale;
                    }
                }
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            add_mat(grad, lo.wq, d, d, &lc.x.t().dot(&dq));
            add_mat(grad, lo.wk, d, d, &lc.x.t().dot(&dk));
            add_mat(grad, lo.wv, d, d, &lc.x.t().dot(&dv));
            dx = &dh1
                + &dq.dot(&self.mat(lo.wq, d, d).t())
                + &dk.dot(&self.mat(lo.wk, d, d).t())
                + &dv.dot(&self.mat(lo.wv, d, d).t());
        }

        for (i, (&t, &p)) in cache.tokens.iter().zip(&cache.positions).enumerate() {
            let row = dx.row(i);
            let te = o.tok + t as usize * d;
            let pe = o.pos + p * d;
            for k in 0..d {
                grad[te + k] += row[k];
                grad[pe + k] += row[k];
            }
        }
    }
}

impl ModelOracle for ToyNet {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn predict(
        &self,
        tokens: &[TokenId],
        layout: &BlockLayout,
        view: AttentionView,
        scope: &[usize],
    ) -> Result<ProbGrid> {
        self.check_layout(layout)?;
        layout.check_len(tokens.len())?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mask = AttnMask::for_view(layout, view);
        let cache = self.forward_raw(tokens, &positions, &mask)?;
        let rows = scope
            .iter()
            .map(|&position| {
                if position >= tokens.len() {
                    return Err(Error::LayoutMismatch(format!("scope position {position} out of range")));
                }
                Ok(ProbRow {
                    position,
                    probs: cache.probs_row(position),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ProbGrid::new(rows, self.config.vocab_size)
    }
}
