//! Minimal decoder-only transformer with explicit forward caches and a
//! hand-written backward pass.
//!
//! Pre-layernorm residual blocks, GELU MLP, learned positional embeddings,
//! untied output head, no dropout. Sequences in a batch are left-padded;
//! positions count real tokens only and padded keys are masked out, so the
//! amount of padding never changes a real token's logits.

mod adam;
mod checkpoint;
mod layers;

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::real::Real;
use layers::{gelu, gelu_grad, layer_norm, layer_norm_backward, LnCache};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds context length {context}")]
    TooLong { len: usize, context: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    BadToken { id: usize, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 2 layers, d_model 64, 4 heads, d_ff 256, context 64.
    pub fn desk_default(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_length: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("context_length", self.context_length),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<A> {
    pub ln1_gain: Array1<A>,
    pub ln1_bias: Array1<A>,
    pub w_q: Array2<A>,
    pub w_k: Array2<A>,
    pub w_v: Array2<A>,
    pub w_o: Array2<A>,
    pub ln2_gain: Array1<A>,
    pub ln2_bias: Array1<A>,
    pub w_in: Array2<A>,
    pub b_in: Array1<A>,
    pub w_out: Array2<A>,
    pub b_out: Array1<A>,
}

/// Model weights. The same type holds gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<A> {
    pub config: ModelConfig,
    pub tok_emb: Array2<A>,
    pub pos_emb: Array2<A>,
    pub blocks: Vec<Block<A>>,
    pub lnf_gain: Array1<A>,
    pub lnf_bias: Array1<A>,
    /// `(d_model, vocab)`.
    pub head: Array2<A>,
}

macro_rules! tensor_list {
    ($p:expr, $view:ident, $iter:ident) => {{
        let p = $p;
        let mut out = vec![p.tok_emb.$view().into_dyn(), p.pos_emb.$view().into_dyn()];
        for b in p.blocks.$iter() {
            out.extend([
                b.ln1_gain.$view().into_dyn(),
                b.ln1_bias.$view().into_dyn(),
                b.w_q.$view().into_dyn(),
                b.w_k.$view().into_dyn(),
                b.w_v.$view().into_dyn(),
                b.w_o.$view().into_dyn(),
                b.ln2_gain.$view().into_dyn(),
                b.ln2_bias.$view().into_dyn(),
                b.w_in.$view().into_dyn(),
                b.b_in.$view().into_dyn(),
                b.w_out.$view().into_dyn(),
                b.b_out.$view().into_dyn(),
            ]);
        }
        out.extend([
            p.lnf_gain.$view().into_dyn(),
            p.lnf_bias.$view().into_dyn(),
            p.head.$view().into_dyn(),
        ]);
        out
    }};
}

impl<A: Real> Parameters<A> {
    /// Normal(0, 0.02) weights, unit layernorm gains, zero biases; draws
    /// happen in declaration order from a ChaCha stream seeded by
    /// `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        Ok(Self::build(config, |rows, cols| {
            Array2::from_shape_simple_fn((rows, cols), || A::of(normal.sample(&mut rng)))
        }))
    }

    /// All tensors zero, including layernorm gains.
    pub fn zeros(config: ModelConfig) -> Self {
        let mut p = Self::build(config, |rows, cols| Array2::zeros((rows, cols)));
        p.lnf_gain.fill(A::zero());
        for b in &mut p.blocks {
            b.ln1_gain.fill(A::zero());
            b.ln2_gain.fill(A::zero());
        }
        p
    }

    fn build(config: ModelConfig, mut draw: impl FnMut(usize, usize) -> Array2<A>) -> Self {
        let (d, ff) = (config.d_model, config.d_ff);
        let tok_emb = draw(config.vocab_size, d);
        let pos_emb = draw(config.context_length, d);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                w_q: draw(d, d),
                w_k: draw(d, d),
                w_v: draw(d, d),
                w_o: draw(d, d),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
                w_in: draw(d, ff),
                b_in: Array1::zeros(ff),
                w_out: draw(ff, d),
                b_out: Array1::zeros(d),
            })
            .collect();
        let head = draw(d, config.vocab_size);
        Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Array1::ones(d),
            lnf_bias: Array1::zeros(d),
            head,
        }
    }

    /// All-zero tensors with this model's shapes.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Views of every tensor in declaration order.
    pub fn tensors(&self) -> Vec<ArrayViewD<'_, A>> {
        tensor_list!(self, view, iter)
    }

    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, A>> {
        tensor_list!(self, view_mut, iter_mut)
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.blocks.len() {
            for n in [
                "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w_in",
                "b_in", "w_out", "b_out",
            ] {
                names.push(format!("blocks.{l}.{n}"));
            }
        }
        names.extend(["lnf_gain", "lnf_bias", "head"].map(String::from));
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<B: Real>(&self) -> Parameters<B> {
        let mut out = Parameters::<B>::zeros(self.config);
        for (mut dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            dst.zip_mut_with(&src, |d, &s| *d = B::of(s.f64()));
        }
        out
    }

    /// Runs the model over a left-padded batch; logits are
    /// `(batch · len, vocab)`, row `b · len + t`.
    pub fn forward(&self, batch: &TokenBatch) -> Result<(Array2<A>, ForwardCache<A>), ModelError> {
        let cfg = &self.config;
        if batch.len > cfg.context_length {
            return Err(ModelError::TooLong {
                len: batch.len,
                context: cfg.context_length,
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(ModelError::BadToken {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let positions = batch.positions();
        let n = batch.ids.len();
        let mut h = Array2::<A>::zeros((n, cfg.d_model));
        for (r, mut row) in h.rows_mut().into_iter().enumerate() {
            row.assign(&self.tok_emb.row(batch.ids[r]));
            row += &self.pos_emb.row(positions[r]);
        }
        let mut layer_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = self.block_forward(block, &h, batch);
            layer_caches.push(cache);
            h = out;
        }
        let (normed, lnf) = layer_norm(&h, &self.lnf_gain, &self.lnf_bias);
        let logits = normed.dot(&self.head);
        Ok((
            logits,
            ForwardCache {
                batch: batch.batch,
                len: batch.len,
                ids: batch.ids.clone(),
                positions,
                key_pad: batch.pad.clone(),
                blocks: layer_caches,
                lnf,
                normed,
            },
        ))
    }

    fn block_forward(&self, b: &Block<A>, h: &Array2<A>, batch: &TokenBatch) -> (Array2<A>, BlockCache<A>) {
        let cfg = &self.config;
        let (t_len, heads, dh) = (batch.len, cfg.n_heads, cfg.head_dim());
        let scale = A::of(1.0 / (dh as f64).sqrt());
        let (a, ln1) = layer_norm(h, &b.ln1_gain, &b.ln1_bias);
        let q = a.dot(&b.w_q);
        let k = a.dot(&b.w_k);
        let v = a.dot(&b.w_v);
        let mut ctx = Array2::<A>::zeros((h.nrows(), cfg.d_model));
        let mut probs = Vec::with_capacity(batch.batch * heads);
        for bi in 0..batch.batch {
            let rows = bi * t_len..(bi + 1) * t_len;
            let pad = &batch.pad[rows.clone()];
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let mut scores = qh.dot(&kh.t());
                for i in 0..t_len {
                    let mut row = scores.row_mut(i);
                    let mut max = A::neg_infinity();
                    for j in 0..t_len {
                        if attends(i, j, pad) {
                            row[j] *= scale;
                            max = max.max(row[j]);
                        }
                    }
                    let mut norm = A::zero();
                    for j in 0..t_len {
                        row[j] = if attends(i, j, pad) { (row[j] - max).exp() } else { A::zero() };
                        norm += row[j];
                    }
                    row.mapv_inplace(|x| x / norm);
                }
                ctx.slice_mut(s![rows.clone(), cols]).assign(&scores.dot(&vh));
                probs.push(scores);
            }
        }
        let h1 = h + &ctx.dot(&b.w_o);
        let (m, ln2) = layer_norm(&h1, &b.ln2_gain, &b.ln2_bias);
        let mut u = m.dot(&b.w_in);
        u += &b.b_in;
        let g = u.mapv(gelu);
        let mut out = g.dot(&b.w_out);
        out += &b.b_out;
        out += &h1;
        (
            out,
            BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                m,
                u,
                g,
            },
        )
    }

    /// Gradients of `Σ dlogits ⊙ logits` w.r.t. every parameter.
    pub fn backward(&self, cache: &ForwardCache<A>, dlogits: &Array2<A>) -> Result<Parameters<A>, ModelError> {
        let cfg = &self.config;
        let n = cache.batch * cache.len;
        if dlogits.dim() != (n, cfg.vocab_size) {
            return Err(ModelError::Shape(format!(
                "dlogits {:?}, expected ({n}, {})",
                dlogits.dim(),
                cfg.vocab_size
            )));
        }
        let mut grads = self.zeros_like();
        grads.head = cache.normed.t().dot(dlogits);
        let dnormed = dlogits.dot(&self.head.t());
        let (mut dh, dg, db) = layer_norm_backward(&dnormed, &cache.lnf, &self.lnf_gain);
        grads.lnf_gain = dg;
        grads.lnf_bias = db;
        for (l, block) in self.blocks.iter().enumerate().rev() {
            dh = self.block_backward(block, &cache.blocks[l], &mut grads.blocks[l], dh, cache);
        }
        for (r, drow) in dh.rows().into_iter().enumerate() {
            let mut t = grads.tok_emb.row_mut(cache.ids[r]);
            t += &drow;
            let mut p = grads.pos_emb.row_mut(cache.positions[r]);
            p += &drow;
        }
        Ok(grads)
    }

    fn block_backward(
        &self,
        b: &Block<A>,
        c: &BlockCache<A>,
        g: &mut Block<A>,
        dout: Array2<A>,
        cache: &ForwardCache<A>,
    ) -> Array2<A> {
        let cfg = &self.config;
        let (t_len, heads, dh) = (cache.len, cfg.n_heads, cfg.head_dim());
        let scale = A::of(1.0 / (dh as f64).sqrt());

        // MLP branch: out = h1 + gelu(m W_in + b_in) W_out + b_out
        g.w_out = c.g.t().dot(&dout);
        g.b_out = dout.sum_axis(Axis(0));
        let mut du = dout.dot(&b.w_out.t());
        du.zip_mut_with(&c.u, |d, &u| *d *= gelu_grad(u));
        g.w_in = c.m.t().dot(&du);
        g.b_in = du.sum_axis(Axis(0));
        let dm = du.dot(&b.w_in.t());
        let (dh1_ln, dg2, db2) = layer_norm_backward(&dm, &c.ln2, &b.ln2_gain);
        g.ln2_gain = dg2;
        g.ln2_bias = db2;
        let dh1 = dout + &dh1_ln;

        // attention branch: h1 = h + ctx W_o
        g.w_o = c.ctx.t().dot(&dh1);
        let dctx = dh1.dot(&b.w_o.t());
        let mut dq = Array2::<A>::zeros(c.q.dim());
        let mut dk = Array2::<A>::zeros(c.k.dim());
        let mut dv = Array2::<A>::zeros(c.v.dim());
        for bi in 0..cache.batch {
            let rows = bi * t_len..(bi + 1) * t_len;
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let p = &c.probs[bi * heads + hd];
                let dctx_h = dctx.slice(s![rows.clone(), cols.clone()]);
                let vh = c.v.slice(s![rows.clone(), cols.clone()]);
                let qh = c.q.slice(s![rows.clone(), cols.clone()]);
                let kh = c.k.slice(s![rows.clone(), cols.clone()]);
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dctx_h));
                let mut ds = dctx_h.dot(&vh.t());
                // softmax backward: dS = P ⊙ (dP - rowsum(dP ⊙ P)), then the 1/√d scale
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: A = drow.iter().zip(prow.iter()).map(|(&d, &p)| d * p).sum();
                    drow.zip_mut_with(&prow, |d, &p| *d = p * (*d - dot) * scale);
                }
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
            }
        }
        g.w_q = c.a.t().dot(&dq);
        g.w_k = c.a.t().dot(&dk);
        g.w_v = c.a.t().dot(&dv);
        let mut da = dq.dot(&b.w_q.t());
        da += &dk.dot(&b.w_k.t());
        da += &dv.dot(&b.w_v.t());
        let (dh_ln, dg1, db1) = layer_norm_backward(&da, &c.ln1, &b.ln1_gain);
        g.ln1_gain = dg1;
        g.ln1_bias = db1;
        dh1 + &dh_ln
    }

    /// Greedy decoding; ties go to the lowest token id. Stops after
    /// `max_new` tokens, on `stop`, or at the context length. Returns the
    /// prompt followed by the generated tokens.
    pub fn generate_greedy(
        &self,
        prompt: &[usize],
        max_new: usize,
        stop: Option<usize>,
    ) -> Result<Vec<usize>, ModelError> {
        Ok(self
            .generate_greedy_batch(&[prompt.to_vec()], max_new, stop)?
            .pop()
            .unwrap())
    }

    /// Batched [`Self::generate_greedy`] over left-padded prompts.
    pub fn generate_greedy_batch(
        &self,
        prompts: &[Vec<usize>],
        max_new: usize,
        stop: Option<usize>,
    ) -> Result<Vec<Vec<usize>>, ModelError> {
        let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
        let mut done = vec![false; seqs.len()];
        for _ in 0..max_new {
            if done.iter().all(|&d| d) {
                break;
            }
            let longest = seqs.iter().map(Vec::len).max().unwrap_or(0);
            if longest >= self.config.context_length || longest == 0 {
                break;
            }
            let batch = TokenBatch::left_padded(&seqs, 0);
            let (logits, _) = self.forward(&batch)?;
            for (b, seq) in seqs.iter_mut().enumerate() {
                if done[b] {
                    continue;
                }
                let row = logits.row(b * batch.len + batch.len - 1);
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                seq.push(best);
                if Some(best) == stop {
                    done[b] = true;
                }
            }
        }
        Ok(seqs)
    }
}

fn attends(query: usize, key: usize, pad: &[bool]) -> bool {
    key <= query && (!pad[key] || key == query)
}

/// Token ids of `batch` sequences of equal length `len`, row-major, with a
/// padding mask (`true` = pad).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub pad: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, pad: Vec<bool>, batch: usize, len: usize) -> Result<Self, ModelError> {
        if ids.len() != batch * len || pad.len() != ids.len() {
            return Err(ModelError::Shape(format!(
                "{} ids and {} pad flags for batch {batch} x len {len}",
                ids.len(),
                pad.len()
            )));
        }
        Ok(Self { ids, pad, batch, len })
    }

    /// Left-pads every sequence to the longest one with `pad_id`.
    pub fn left_padded(seqs: &[Vec<usize>], pad_id: usize) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut pad = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let fill = len - s.len();
            ids.extend(std::iter::repeat_n(pad_id, fill).chain(s.iter().copied()));
            pad.extend(std::iter::repeat_n(true, fill).chain(std::iter::repeat_n(false, s.len())));
        }
        Self {
            ids,
            pad,
            batch: seqs.len(),
            len,
        }
    }

    /// Position index of every token: the count of real tokens before it in
    /// its row (pads sit at 0).
    pub fn positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.ids.len());
        for b in 0..self.batch {
            let mut seen = 0;
            for t in 0..self.len {
                if self.pad[b * self.len + t] {
                    out.push(0);
                } else {
                    out.push(seen);
                    seen += 1;
                }
            }
        }
        out
    }
}

/// Activations saved by one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache<A> {
    batch: usize,
    len: usize,
    ids: Vec<usize>,
    positions: Vec<usize>,
    #[allow(dead_code)]
    key_pad: Vec<bool>,
    blocks: Vec<BlockCache<A>>,
    lnf: LnCache<A>,
    normed: Array2<A>,
}

#[derive(Debug, Clone)]
struct BlockCache<A> {
    ln1: LnCache<A>,
    a: Array2<A>,
    q: Array2<A>,
    k: Array2<A>,
    v: Array2<A>,
    probs: Vec<Array2<A>>,
    ctx: Array2<A>,
    ln2: LnCache<A>,
    m: Array2<A>,
    u: Array2<A>,
    g: Array2<A>,
}

#[cfg(test)]
mod tests;
