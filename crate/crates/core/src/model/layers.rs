//! Transformer sublayers expressed as graph builders over bound parameters.

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tape::{Graph, KeySpan, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.matrix(format!("{name}.w"), &[d_in, d_out], d_in, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), d_out));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), d),
            bias: store.zeros(format!("{name}.bias"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, d_ff, true, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.relu(h);
        self.down.forward(g, p, h)
    }
}

/// Projected keys and values of an attention memory.
#[derive(Debug, Clone, Copy)]
pub struct KeyValues {
    pub keys: Var,
    pub values: Var,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, true, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d, d, true, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, true, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, true, rng),
            heads,
        }
    }

    pub fn project_memory(&self, g: &mut Graph, p: &Bound, mem: Var) -> Result<KeyValues> {
        Ok(KeyValues {
            keys: self.wk.forward(g, p, mem)?,
            values: self.wv.forward(g, p, mem)?,
        })
    }

    /// Attention of `xq` over pre-projected keys/values, one key span per query row.
    pub fn attend(&self, g: &mut Graph, p: &Bound, xq: Var, kv: KeyValues, spans: &[KeySpan]) -> Result<Var> {
        let q = self.wq.forward(g, p, xq)?;
        let heads = g.attention(q, kv.keys, kv.values, spans, self.heads)?;
        self.wo.forward(g, p, heads)
    }

    pub fn forward_spans(&self, g: &mut Graph, p: &Bound, xq: Var, xkv: Var, spans: &[KeySpan]) -> Result<Var> {
        let kv = self.project_memory(g, p, xkv)?;
        self.attend(g, p, xq, kv, spans)
    }

    /// Dense masked attention built from primitive operations: per head,
    /// `softmax(mask(Q Kᵀ / sqrt(d_k))) V`, heads concatenated then projected.
    /// `keep` is row-major `[rows(xq) × rows(xkv)]`.
    pub fn forward_masked(&self, g: &mut Graph, p: &Bound, xq: Var, xkv: Var, keep: &[bool]) -> Result<Var> {
        let (nq, nk) = (g.rows(xq), g.rows(xkv));
        if keep.len() != nq * nk {
            return Err(Error::dim("forward_masked", &[nq, nk], &[keep.len()]));
        }
        let q = self.wq.forward(g, p, xq)?;
        let kv = self.project_memory(g, p, xkv)?;
        let d = g.cols(q);
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(kv.keys, h * dk, dk)?;
            let vh = g.slice_cols(kv.values, h * dk, dk)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let probs = g.masked_softmax(scores, keep)?;
            outs.push(g.matmul(probs, vh)?);
        }
        let cat = g.concat_cols(&outs)?;
        self.wo.forward(g, p, cat)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, d_ff, rng),
        }
    }

    pub fn forward_spans(&self, g: &mut Graph, p: &Bound, x: Var, spans: &[KeySpan]) -> Result<Var> {
        let h = self.ln_attn.forward(g, p, x)?;
        let a = self.attn.forward_spans(g, p, h, h, spans)?;
        let x = g.add(x, a)?;
        self.feed_forward(g, p, x)
    }

    pub fn forward_masked(&self, g: &mut Graph, p: &Bound, x: Var, keep: &[bool]) -> Result<Var> {
        let h = self.ln_attn.forward(g, p, x)?;
        let a = self.attn.forward_masked(g, p, h, h, keep)?;
        let x = g.add(x, a)?;
        self.feed_forward(g, p, x)
    }

    pub fn feed_forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ln_ff.forward(g, p, x)?;
        let f = self.ff.forward(g, p, h)?;
        g.add(x, f)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads, rng),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, d_ff, rng),
        }
    }

    pub fn self_norm(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.ln_self.forward(g, p, x)
    }

    /// Self-attention sublayer. `normed` is `self_norm(x)`; `kv` holds the
    /// projected keys/values of every visible target position (a cache in
    /// streaming mode, or the projections of `normed` when batched).
    pub fn self_block(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        normed: Var,
        kv: KeyValues,
        spans: &[KeySpan],
    ) -> Result<Var> {
        let a = self.self_attn.attend(g, p, normed, kv, spans)?;
        g.add(x, a)
    }

    pub fn cross_block(&self, g: &mut Graph, p: &Bound, x: Var, kv: KeyValues, spans: &[KeySpan]) -> Result<Var> {
        let h = self.ln_cross.forward(g, p, x)?;
        let c = self.cross_attn.attend(g, p, h, kv, spans)?;
        let x = g.add(x, c)?;
        let h = self.ln_ff.forward(g, p, x)?;
        let f = self.ff.forward(g, p, h)?;
        g.add(x, f)
    }
}
