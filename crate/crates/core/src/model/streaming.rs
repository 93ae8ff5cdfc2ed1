//! Token-at-a-time execution for simultaneous decoding.
//!
//! The incremental model keeps per-layer key/value caches for its causal
//! encoder, so reading a token costs one row of work regardless of how many
//! tokens came before. The recompute and offline models re-encode the
//! visible prefix whenever it has grown since the last write.

use super::layers::KeyValues;
use super::network::{Seq2Seq, Variant};
use super::params::Bound;
use crate::error::{Error, Result};
use crate::tape::{Graph, KeySpan, Var};

/// Rows of projected keys and values, appended one token at a time.
#[derive(Debug, Clone, Default)]
pub struct KvRows {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub rows: usize,
}

impl KvRows {
    fn push(&mut self, k: &[f64], v: &[f64]) {
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
        self.rows += 1;
    }

    fn constants(&self, g: &mut Graph, rows: usize, d: usize) -> Result<KeyValues> {
        Ok(KeyValues {
            keys: g.constant(&[rows, d], self.keys[..rows * d].to_vec())?,
            values: g.constant(&[rows, d], self.values[..rows * d].to_vec())?,
        })
    }
}

/// Running mean of consumed input embeddings plus the projection weight.
#[derive(Debug, Clone)]
pub struct AelState {
    pub weight: Vec<f64>,
    pub running_sum: Vec<f64>,
    pub count: usize,
}

impl AelState {
    pub fn new(weight: Vec<f64>, d: usize) -> Self {
        Self {
            weight,
            running_sum: vec![0.0; d],
            count: 0,
        }
    }

    pub fn push(&mut self, embedding: &[f64]) {
        for (s, e) in self.running_sum.iter_mut().zip(embedding) {
            *s += e;
        }
        self.count += 1;
    }

    pub fn mean(&self) -> Vec<f64> {
        let c = self.count.max(1) as f64;
        self.running_sum.iter().map(|s| s / c).collect()
    }
}

/// Per-layer caches of the causal encoder plus everything the decoder
/// needs from each encoded token.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    d_model: usize,
    layers: Vec<KvRows>,
    /// Final encoder states, one row per read token.
    pub z: Vec<f64>,
    /// Decoder cross-attention projections of `z`, one entry per decoder layer.
    pub cross: Vec<KvRows>,
    pub ael: Option<AelState>,
}

impl EncoderCache {
    pub fn new(model: &Seq2Seq) -> Self {
        let d = model.config.d_model;
        Self {
            d_model: d,
            layers: vec![KvRows::default(); model.encoder.len()],
            z: Vec::new(),
            cross: vec![KvRows::default(); model.decoder.len()],
            ael: model
                .ael
                .map(|w| AelState::new(model.params.get(w).values().to_vec(), d)),
        }
    }

    pub fn len(&self) -> usize {
        self.z.len() / self.d_model
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    fn check(&self, model: &Seq2Seq) -> Result<()> {
        if self.d_model != model.config.d_model
            || self.layers.len() != model.encoder.len()
            || self.cross.len() != model.decoder.len()
        {
            return Err(Error::State("encoder cache was built for a different model".into()));
        }
        let n = self.len();
        if let Some(bad) = self.layers.iter().chain(&self.cross).find(|l| l.rows != n) {
            return Err(Error::State(format!(
                "cache holds {} rows but {n} tokens were encoded",
                bad.rows
            )));
        }
        Ok(())
    }

    /// Encodes one more source token and returns its final encoder state.
    pub fn push(&mut self, model: &Seq2Seq, g: &mut Graph, p: &Bound, token: usize) -> Result<Vec<f64>> {
        if model.variant != Variant::Incremental {
            return Err(Error::State(format!(
                "streaming encoder needs the incremental model, got {}",
                model.variant.name()
            )));
        }
        self.check(model)?;
        let pos = self.len();
        if pos >= model.config.max_len {
            return Err(Error::Length {
                len: pos + 1,
                max: model.config.max_len,
            });
        }
        if token >= model.config.src_vocab {
            return Err(Error::Index {
                op: "token",
                index: token,
                extent: model.config.src_vocab,
            });
        }
        let d = self.d_model;
        let e = model.embed(g, p, model.src_emb, &[token], 1, pos)?;
        let mut x = e;
        for (layer, cache) in model.encoder.iter().zip(&mut self.layers) {
            let h = layer.ln_attn.forward(g, p, x)?;
            let kv = layer.attn.project_memory(g, p, h)?;
            cache.push(g.value(kv.keys), g.value(kv.values));
            let kv = cache.constants(g, pos + 1, d)?;
            let a = layer.attn.attend(g, p, h, kv, &[KeySpan::new(0, pos + 1)])?;
            let y = g.add(x, a)?;
            x = layer.feed_forward(g, p, y)?;
        }
        let z = model.enc_norm.forward(g, p, x)?;
        for (layer, cache) in model.decoder.iter().zip(&mut self.cross) {
            let kv = layer.cross_attn.project_memory(g, p, z)?;
            cache.push(g.value(kv.keys), g.value(kv.values));
        }
        if let Some(ael) = &mut self.ael {
            ael.push(g.value(e));
        }
        let row = g.value(z).to_vec();
        self.z.extend_from_slice(&row);
        Ok(row)
    }

    /// Final-layer keys/values over `h[read][..read]`.
    fn ael_memory(&self, model: &Seq2Seq, g: &mut Graph, p: &Bound, read: usize) -> Result<KeyValues> {
        let d = self.d_model;
        let ael = self
            .ael
            .as_ref()
            .ok_or_else(|| Error::State("cache has no AEL state".into()))?;
        if ael.count != read {
            return Err(Error::State(format!(
                "AEL state covers {} tokens, asked for {read}",
                ael.count
            )));
        }
        let cross = &model.decoder.last().expect("decoder layer").cross_attn;
        let mean = g.constant(&[1, d], ael.mean())?;
        let w = g.constant(&[d, d], ael.weight.clone())?;
        let f = g.matmul(mean, w)?;
        let kf = g.matmul(f, p.var(cross.wk.w))?;
        let vf = g.matmul(f, p.var(cross.wv.w))?;
        let (kf, vf) = (g.value(kf).to_vec(), g.value(vf).to_vec());
        let last = self.cross.last().expect("cross cache");
        let mut keys = Vec::with_capacity(read * d);
        let mut values = Vec::with_capacity(read * d);
        for j in 0..read {
            for c in 0..d {
                keys.push(kf[c] + last.keys[j * d + c]);
                values.push(vf[c] + last.values[j * d + c]);
            }
        }
        Ok(KeyValues {
            keys: g.constant(&[read, d], keys)?,
            values: g.constant(&[read, d], values)?,
        })
    }
}

/// Self-attention caches of the decoder.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    layers: Vec<KvRows>,
    steps: usize,
}

impl DecoderCache {
    pub fn new(model: &Seq2Seq) -> Self {
        Self {
            layers: vec![KvRows::default(); model.decoder.len()],
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Feeds the previous target token and returns next-token logits.
    /// `memory[l]` is the cross-attention memory of decoder layer `l`.
    fn step(
        &mut self,
        model: &Seq2Seq,
        g: &mut Graph,
        p: &Bound,
        token: usize,
        memory: &[KeyValues],
    ) -> Result<Vec<f64>> {
        if self.layers.len() != model.decoder.len() || memory.len() != model.decoder.len() {
            return Err(Error::State("decoder cache was built for a different model".into()));
        }
        let d = model.config.d_model;
        let pos = self.steps;
        let mut y = model.embed(g, p, model.tgt_emb, &[token], 1, pos)?;
        for ((layer, cache), kv) in model.decoder.iter().zip(&mut self.layers).zip(memory) {
            let normed = layer.self_norm(g, p, y)?;
            let own = layer.self_attn.project_memory(g, p, normed)?;
            cache.push(g.value(own.keys), g.value(own.values));
            let past = cache.constants(g, pos + 1, d)?;
            y = layer.self_block(g, p, y, normed, past, &[KeySpan::new(0, pos + 1)])?;
            let rows = g.rows(kv.keys);
            y = layer.cross_block(g, p, y, *kv, &[KeySpan::new(0, rows)])?;
        }
        let y = model.dec_norm.forward(g, p, y)?;
        let logits = model.output.forward(g, p, y)?;
        self.steps += 1;
        Ok(g.value(logits).to_vec())
    }
}

/// One simultaneous-decoding session over a shared, immutable model.
pub struct StreamingSession<'m> {
    model: &'m Seq2Seq,
    graph: Graph,
    params: Bound,
    source: Vec<usize>,
    encoder: EncoderCache,
    decoder: DecoderCache,
    prefix_memory: Option<(usize, Vec<Var>)>,
    access_log: Vec<usize>,
}

impl<'m> StreamingSession<'m> {
    pub fn new(model: &'m Seq2Seq) -> Self {
        let mut graph = Graph::inference();
        let params = model.bind(&mut graph, false);
        Self {
            model,
            graph,
            params,
            source: Vec::new(),
            encoder: EncoderCache::new(model),
            decoder: DecoderCache::new(model),
            prefix_memory: None,
            access_log: Vec::new(),
        }
    }

    pub fn model(&self) -> &Seq2Seq {
        self.model
    }

    pub fn read_count(&self) -> usize {
        self.source.len()
    }

    pub fn written(&self) -> usize {
        self.decoder.steps()
    }

    /// Number of source positions visible at each write so far.
    pub fn access_log(&self) -> &[usize] {
        &self.access_log
    }

    pub fn encoder_cache(&self) -> &EncoderCache {
        &self.encoder
    }

    /// Consumes one source token. Returns its encoder state for the
    /// incremental model; other variants defer encoding to the next write.
    pub fn read(&mut self, token: usize) -> Result<Option<Vec<f64>>> {
        if self.source.len() >= self.model.config.max_len {
            return Err(Error::Length {
                len: self.source.len() + 1,
                max: self.model.config.max_len,
            });
        }
        if token >= self.model.config.src_vocab {
            return Err(Error::Index {
                op: "token",
                index: token,
                extent: self.model.config.src_vocab,
            });
        }
        self.source.push(token);
        if self.model.variant == Variant::Incremental {
            let row = self.encoder.push(self.model, &mut self.graph, &self.params, token)?;
            return Ok(Some(row));
        }
        Ok(None)
    }

    /// Feeds the previously written token (BOS first) and returns logits
    /// for the next target token given everything read so far.
    pub fn write(&mut self, prev: usize) -> Result<Vec<f64>> {
        let read = self.source.len();
        if read == 0 {
            return Err(Error::State("write before any source token was read".into()));
        }
        let memory = self.memory(read)?;
        self.access_log.push(read);
        self.decoder
            .step(self.model, &mut self.graph, &self.params, prev, &memory)
    }

    fn memory(&mut self, read: usize) -> Result<Vec<KeyValues>> {
        let model = self.model;
        let (g, p) = (&mut self.graph, &self.params);
        let d = model.config.d_model;
        match model.variant {
            Variant::Incremental => {
                let layers = model.decoder.len();
                let mut out = Vec::with_capacity(layers);
                for cache in &self.encoder.cross[..layers - 1] {
                    out.push(cache.constants(g, read, d)?);
                }
                out.push(self.encoder.ael_memory(model, g, p, read)?);
                Ok(out)
            }
            Variant::Offline | Variant::Recompute => {
                let stale = self.prefix_memory.as_ref().map_or(true, |(n, _)| *n != read);
                if stale {
                    let prefix = &self.source[..read];
                    let e = model.embed_source(g, p, prefix, read)?;
                    let z = model.encode_bidirectional_batch(g, p, e, &[read], read)?;
                    let mut vars = Vec::with_capacity(2 * model.decoder.len());
                    for layer in &model.decoder {
                        let kv = layer.cross_attn.project_memory(g, p, z)?;
                        vars.push(kv.keys);
                        vars.push(kv.values);
                    }
                    self.prefix_memory = Some((read, vars));
                }
                let (_, vars) = self.prefix_memory.as_ref().expect("prefix memory");
                Ok(vars
                    .chunks(2)
                    .map(|kv| KeyValues {
                        keys: kv[0],
                        values: kv[1],
                    })
                    .collect())
            }
        }
    }
}
