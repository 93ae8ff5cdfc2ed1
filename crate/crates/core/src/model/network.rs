//! Encoder–decoder network in three flavours that share one parameter layout:
//!
//! * [`Variant::Offline`]: bidirectional encoder, decoder sees the whole
//!   source. This is the full-sentence teacher.
//! * [`Variant::Incremental`]: left-to-right encoder; the decoder's final
//!   layer attends over average-embedding-adjusted states `h[g(t)]`, the
//!   other layers over the raw prefix `z[..g(t)]`.
//! * [`Variant::Recompute`]: wait-k with a bidirectional encoder that
//!   re-encodes the visible prefix for every decoding step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{DecoderLayer, EncoderLayer, KeyValues, LayerNorm, Linear};
use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tape::{Graph, KeySpan, Var};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS, PAD};
use crate::waitk::WaitKSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Offline,
    Incremental,
    Recompute,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Offline => "offline",
            Variant::Incremental => "incremental",
            Variant::Recompute => "recompute",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Variant::Offline),
            "incremental" => Ok(Variant::Incremental),
            "recompute" => Ok(Variant::Recompute),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

/// Encoder hidden states for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `[n × d_model]`
    pub z: Tensor,
    pub n: usize,
}

/// `h[i][j]`: state of source token `j` once `i` tokens have been read
/// (0-based here: row block `i` covers `i + 1` tokens). Zero for `j > i`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalHiddenStates {
    /// `[n × n × d_model]`
    pub h: Tensor,
    pub n: usize,
}

impl IncrementalHiddenStates {
    /// The `read × d_model` slice used when `read` source tokens are visible.
    pub fn slice(&self, read: usize) -> Result<&[f64]> {
        if read == 0 || read > self.n {
            return Err(Error::Schedule(format!(
                "slice of {read} tokens from a {}-token source",
                self.n
            )));
        }
        let d = self.h.cols();
        let start = (read - 1) * self.n * d;
        Ok(&self.h.values()[start..start + read * d])
    }

    pub fn state(&self, read: usize, token: usize) -> &[f64] {
        let d = self.h.cols();
        let o = ((read - 1) * self.n + token) * d;
        &self.h.values()[o..o + d]
    }
}

/// Sentences padded to common source and target extents.
///
/// Decoder inputs are `BOS y₁ … y_m`, labels are `y₁ … y_m EOS`, so each
/// pair contributes `m + 1` decoding steps.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub size: usize,
    pub src_ids: Vec<usize>,
    pub src_lens: Vec<usize>,
    pub src_block: usize,
    pub dec_inputs: Vec<usize>,
    pub labels: Vec<usize>,
    pub steps: Vec<usize>,
    pub tgt_block: usize,
}

impl PaddedBatch {
    pub fn new<S: AsRef<[usize]>, T: AsRef<[usize]>>(pairs: &[(S, T)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if let Some(i) = pairs.iter().position(|(s, _)| s.as_ref().is_empty()) {
            return Err(Error::Contract(format!("batch entry {i} has an empty source")));
        }
        let src_block = pairs.iter().map(|(s, _)| s.as_ref().len()).max().unwrap();
        let tgt_block = pairs.iter().map(|(_, t)| t.as_ref().len() + 1).max().unwrap();
        let size = pairs.len();
        let mut b = Self {
            size,
            src_ids: vec![PAD; size * src_block],
            src_lens: Vec::with_capacity(size),
            src_block,
            dec_inputs: vec![PAD; size * tgt_block],
            labels: vec![PAD; size * tgt_block],
            steps: Vec::with_capacity(size),
            tgt_block,
        };
        for (i, (s, t)) in pairs.iter().enumerate() {
            let (s, t) = (s.as_ref(), t.as_ref());
            b.src_ids[i * src_block..i * src_block + s.len()].copy_from_slice(s);
            b.src_lens.push(s.len());
            let base = i * tgt_block;
            b.dec_inputs[base] = BOS;
            b.dec_inputs[base + 1..base + 1 + t.len()].copy_from_slice(t);
            b.labels[base..base + t.len()].copy_from_slice(t);
            b.labels[base + t.len()] = EOS;
            b.steps.push(t.len() + 1);
        }
        Ok(b)
    }

    /// Real (non-padding) source rows.
    pub fn src_keep(&self) -> Vec<bool> {
        (0..self.size * self.src_block)
            .map(|r| r % self.src_block < self.src_lens[r / self.src_block])
            .collect()
    }

    /// Real (non-padding) decoder rows.
    pub fn tgt_keep(&self) -> Vec<bool> {
        (0..self.size * self.tgt_block)
            .map(|r| r % self.tgt_block < self.steps[r / self.tgt_block])
            .collect()
    }

    /// Sources visible at each decoder row under wait-`k`.
    pub fn visible(&self, k: usize) -> Vec<usize> {
        (0..self.size * self.tgt_block)
            .map(|r| {
                let (b, t) = (r / self.tgt_block, r % self.tgt_block);
                WaitKSchedule::new_unchecked(k, self.src_lens[b]).g0(t)
            })
            .collect()
    }
}

/// Graph handles produced by a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutput {
    /// `[size·tgt_block × tgt_vocab]`
    pub logits: Var,
    /// Final-layer encoder states `[size·src_block × d_model]` (for the
    /// recompute variant, the states of the last decoding step).
    pub encoder: Var,
    /// Input embeddings with positions, `[size·src_block × d_model]`.
    pub embeddings: Var,
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub variant: Variant,
    pub params: ParamStore,
    pub(crate) src_emb: ParamId,
    pub(crate) tgt_emb: ParamId,
    pub(crate) encoder: Vec<EncoderLayer>,
    pub(crate) enc_norm: LayerNorm,
    pub(crate) decoder: Vec<DecoderLayer>,
    pub(crate) dec_norm: LayerNorm,
    pub(crate) output: Linear,
    pub(crate) ael: Option<ParamId>,
}

/// Sinusoidal position code for `pos` in `d` dimensions.
pub fn positional_encoding(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let rate = 10000f64.powf((2 * (c / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, ff) = (config.d_model, config.n_heads, config.d_ff);
        let mut store = ParamStore::new();
        let src_emb = store.matrix("src_emb", &[config.src_vocab, d], d, &mut rng);
        let tgt_emb = store.matrix("tgt_emb", &[config.tgt_vocab, d], d, &mut rng);
        let encoder = (0..config.n_layers)
            .map(|l| EncoderLayer::new(&mut store, &format!("enc.{l}"), d, h, ff, &mut rng))
            .collect();
        let enc_norm = LayerNorm::new(&mut store, "enc.norm", d);
        let decoder = (0..config.n_layers)
            .map(|l| DecoderLayer::new(&mut store, &format!("dec.{l}"), d, h, ff, &mut rng))
            .collect();
        let dec_norm = LayerNorm::new(&mut store, "dec.norm", d);
        let output = Linear::new(&mut store, "out", d, config.tgt_vocab, true, &mut rng);
        let ael = (variant == Variant::Incremental).then(|| store.matrix("ael.w", &[d, d], d, &mut rng));
        Ok(Self {
            config,
            variant,
            params: store,
            src_emb,
            tgt_emb,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            output,
            ael,
        })
    }

    pub fn ael_weight(&self) -> Option<ParamId> {
        self.ael
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    fn check_tokens(&self, ids: &[usize], vocab: usize) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                op: "token",
                index: bad,
                extent: vocab,
            });
        }
        Ok(())
    }

    /// `emb[ids]·sqrt(d) + PE`, positions restarting every `block` rows.
    pub(crate) fn embed(
        &self,
        g: &mut Graph,
        p: &Bound,
        table: ParamId,
        ids: &[usize],
        block: usize,
        offset: usize,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let e = g.embedding(p.var(table), ids)?;
        let e = g.scale(e, (d as f64).sqrt());
        let mut pe = Vec::with_capacity(ids.len() * d);
        for r in 0..ids.len() {
            pe.extend(positional_encoding(offset + r % block, d));
        }
        let pe = g.constant(&[ids.len(), d], pe)?;
        g.add(e, pe)
    }

    pub(crate) fn embed_source(&self, g: &mut Graph, p: &Bound, ids: &[usize], block: usize) -> Result<Var> {
        self.embed(g, p, self.src_emb, ids, block, 0)
    }

    pub(crate) fn run_encoder(&self, g: &mut Graph, p: &Bound, x: Var, spans: &[KeySpan]) -> Result<Var> {
        let mut x = x;
        for layer in &self.encoder {
            x = layer.forward_spans(g, p, x, spans)?;
        }
        self.enc_norm.forward(g, p, x)
    }

    /// Running-mean projection `f = mean(E[..=i]) · W`, per source block.
    pub(crate) fn ael_summary(&self, g: &mut Graph, p: &Bound, e: Var, block: usize) -> Result<Var> {
        let w = self
            .ael
            .ok_or_else(|| Error::Contract(format!("{} model has no AEL weight", self.variant.name())))?;
        let a = g.masked_cumulative_mean(e, block)?;
        g.matmul(a, p.var(w))
    }

    /// Keys/values of the final decoder layer's cross-attention over
    /// `h[i][j] = f_i + z_j`, using `W(f_i + z_j) = W f_i + W z_j`.
    pub(crate) fn ael_memory(&self, g: &mut Graph, p: &Bound, z: Var, f: Var, block: usize) -> Result<KeyValues> {
        let cross = &self.decoder.last().expect("decoder layer").cross_attn;
        let kz = cross.wk.forward(g, p, z)?;
        let vz = cross.wv.forward(g, p, z)?;
        let kf = g.matmul(f, p.var(cross.wk.w))?;
        let vf = g.matmul(f, p.var(cross.wv.w))?;
        Ok(KeyValues {
            keys: g.incremental_states(kz, kf, block)?,
            values: g.incremental_states(vz, vf, block)?,
        })
    }

    fn bidirectional_spans(lens: &[usize], block: usize) -> Vec<KeySpan> {
        (0..lens.len() * block)
            .map(|r| KeySpan::new((r / block) * block, lens[r / block]))
            .collect()
    }

    fn causal_spans(rows: usize, block: usize) -> Vec<KeySpan> {
        (0..rows)
            .map(|r| KeySpan::new((r / block) * block, r % block + 1))
            .collect()
    }

    /// Bidirectional encoder restricted to each sentence's own length.
    pub fn encode_bidirectional_batch(
        &self,
        g: &mut Graph,
        p: &Bound,
        e: Var,
        lens: &[usize],
        block: usize,
    ) -> Result<Var> {
        let spans = Self::bidirectional_spans(lens, block);
        self.run_encoder(g, p, e, &spans)
    }

    /// Left-to-right encoder: row `i` attends to rows `..=i` of its block.
    pub fn encode_unidirectional_batch(&self, g: &mut Graph, p: &Bound, e: Var, block: usize) -> Result<Var> {
        let spans = Self::causal_spans(g.rows(e), block);
        self.run_encoder(g, p, e, &spans)
    }

    /// One full encoder pass per distinct prefix `g(t)` over the whole
    /// block, with attention limited to `i, j < g(t)` and rows beyond `g(t)`
    /// zeroed. Output rows are ordered `(sentence, step, position)`.
    pub fn encode_recompute_batch(
        &self,
        g: &mut Graph,
        p: &Bound,
        e: Var,
        lens: &[usize],
        block: usize,
        steps: usize,
        k: usize,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let mut parts = Vec::with_capacity(lens.len() * steps);
        for (b, &len) in lens.iter().enumerate() {
            let x0 = g.slice_rows(e, b * block, block)?;
            let schedule = WaitKSchedule::new(k, len)?;
            let mut previous: Option<(usize, Var)> = None;
            for t in 0..steps {
                let read = schedule.g0(t);
                // Steps that see the same prefix share one encoding.
                if let Some((r, v)) = previous {
                    if r == read {
                        parts.push(v);
                        continue;
                    }
                }
                let keep: Vec<bool> = (0..block * block)
                    .map(|ij| ij / block < read && ij % block < read)
                    .collect();
                let mut x = x0;
                for layer in &self.encoder {
                    x = layer.forward_masked(g, p, x, &keep)?;
                }
                let x = self.enc_norm.forward(g, p, x)?;
                let rows: Vec<f64> = (0..block * d).map(|i| if i / d < read { 1.0 } else { 0.0 }).collect();
                let rows = g.constant(&[block, d], rows)?;
                let masked = g.mul(x, rows)?;
                previous = Some((read, masked));
                parts.push(masked);
            }
        }
        g.concat_rows(&parts)
    }

    fn run_decoder(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &PaddedBatch,
        cross: &[(KeyValues, Vec<KeySpan>)],
    ) -> Result<Var> {
        let mut y = self.embed(g, p, self.tgt_emb, &batch.dec_inputs, batch.tgt_block, 0)?;
        let self_spans = Self::causal_spans(g.rows(y), batch.tgt_block);
        for (layer, (kv, spans)) in self.decoder.iter().zip(cross) {
            let normed = layer.self_norm(g, p, y)?;
            let self_kv = layer.self_attn.project_memory(g, p, normed)?;
            y = layer.self_block(g, p, y, normed, self_kv, &self_spans)?;
            y = layer.cross_block(g, p, y, *kv, spans)?;
        }
        let y = self.dec_norm.forward(g, p, y)?;
        self.output.forward(g, p, y)
    }

    fn check_batch(&self, batch: &PaddedBatch) -> Result<()> {
        for b in 0..batch.size {
            let s = &batch.src_ids[b * batch.src_block..b * batch.src_block + batch.src_lens[b]];
            self.check_tokens(s, self.config.src_vocab)?;
            let t = &batch.dec_inputs[b * batch.tgt_block..b * batch.tgt_block + batch.steps[b]];
            self.check_tokens(&t[1..], self.config.tgt_vocab)?;
        }
        Ok(())
    }

    /// Teacher-forced forward pass over a padded batch. `k` is ignored by
    /// the offline variant.
    pub fn forward_batch(&self, g: &mut Graph, p: &Bound, batch: &PaddedBatch, k: usize) -> Result<BatchOutput> {
        self.check_batch(batch)?;
        if k == 0 {
            return Err(Error::Schedule("wait parameter k must be positive".into()));
        }
        let n = batch.src_block;
        let e = self.embed_source(g, p, &batch.src_ids, n)?;
        let visible = batch.visible(k);
        let layers = self.decoder.len();
        let (encoder, cross) = match self.variant {
            Variant::Offline => {
                let z = self.encode_bidirectional_batch(g, p, e, &batch.src_lens, n)?;
                let spans: Vec<KeySpan> = (0..visible.len())
                    .map(|r| {
                        let b = r / batch.tgt_block;
                        KeySpan::new(b * n, batch.src_lens[b])
                    })
                    .collect();
                let mut cross = Vec::with_capacity(layers);
                for layer in &self.decoder {
                    cross.push((layer.cross_attn.project_memory(g, p, z)?, spans.clone()));
                }
                (z, cross)
            }
            Variant::Incremental => {
                let z = self.encode_unidirectional_batch(g, p, e, n)?;
                let prefix: Vec<KeySpan> = visible
                    .iter()
                    .enumerate()
                    .map(|(r, &read)| KeySpan::new((r / batch.tgt_block) * n, read))
                    .collect();
                let mut cross = Vec::with_capacity(layers);
                for layer in &self.decoder[..layers - 1] {
                    cross.push((layer.cross_attn.project_memory(g, p, z)?, prefix.clone()));
                }
                let f = self.ael_summary(g, p, e, n)?;
                let kv = self.ael_memory(g, p, z, f, n)?;
                let sliced = visible
                    .iter()
                    .enumerate()
                    .map(|(r, &read)| {
                        let b = r / batch.tgt_block;
                        KeySpan::new((b * n + read - 1) * n, read)
                    })
                    .collect();
                cross.push((kv, sliced));
                (z, cross)
            }
            Variant::Recompute => {
                let steps = batch.tgt_block;
                let zs = self.encode_recompute_batch(g, p, e, &batch.src_lens, n, steps, k)?;
                let spans: Vec<KeySpan> = visible
                    .iter()
                    .enumerate()
                    .map(|(r, &read)| KeySpan::new(r * n, read))
                    .collect();
                let mut cross = Vec::with_capacity(layers);
                for layer in &self.decoder {
                    cross.push((layer.cross_attn.project_memory(g, p, zs)?, spans.clone()));
                }
                let last: Vec<Var> = (0..batch.size)
                    .map(|b| g.slice_rows(zs, ((b + 1) * steps - 1) * n, n))
                    .collect::<Result<_>>()?;
                (g.concat_rows(&last)?, cross)
            }
        };
        let logits = self.run_decoder(g, p, batch, &cross)?;
        Ok(BatchOutput {
            logits,
            encoder,
            embeddings: e,
        })
    }

    // ----- single-sentence entry points (no gradient recording) -----

    fn sentence_embeddings(&self, tokens: &[usize]) -> Result<(Graph, Bound, Var)> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty source sentence".into()));
        }
        self.check_tokens(tokens, self.config.src_vocab)?;
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let e = self.embed_source(&mut g, &p, tokens, tokens.len())?;
        Ok((g, p, e))
    }

    /// Input embeddings (token embedding scaled plus position code), `[n × d]`.
    pub fn source_embeddings(&self, tokens: &[usize]) -> Result<Tensor> {
        let (g, _, e) = self.sentence_embeddings(tokens)?;
        Ok(g.tensor(e))
    }

    pub fn encode_bidirectional(&self, tokens: &[usize]) -> Result<EncoderOutput> {
        let (mut g, p, e) = self.sentence_embeddings(tokens)?;
        let z = self.encode_bidirectional_batch(&mut g, &p, e, &[tokens.len()], tokens.len())?;
        Ok(EncoderOutput {
            z: g.tensor(z),
            n: tokens.len(),
        })
    }

    pub fn encode_unidirectional(&self, tokens: &[usize]) -> Result<EncoderOutput> {
        let (mut g, p, e) = self.sentence_embeddings(tokens)?;
        let z = self.encode_unidirectional_batch(&mut g, &p, e, tokens.len())?;
        Ok(EncoderOutput {
            z: g.tensor(z),
            n: tokens.len(),
        })
    }

    /// Prefix re-encodings for `steps` decoding steps: `[steps × n × d]`.
    pub fn encode_waitk_recompute(&self, tokens: &[usize], schedule: &WaitKSchedule, steps: usize) -> Result<Tensor> {
        if steps == 0 {
            return Err(Error::Contract("need at least one decoding step".into()));
        }
        if schedule.src_len() != tokens.len() {
            return Err(Error::Schedule(format!(
                "schedule for {} tokens applied to {}",
                schedule.src_len(),
                tokens.len()
            )));
        }
        let n = tokens.len();
        let (mut g, p, e) = self.sentence_embeddings(tokens)?;
        let zs = self.encode_recompute_batch(&mut g, &p, e, &[n], n, steps, schedule.k())?;
        let values = g.value(zs).to_vec();
        Tensor::new(&[steps, n, self.config.d_model], values)
    }

    /// Average-embedding states from input embeddings `e` and encoder states `z`.
    pub fn ael_forward(&self, e: &Tensor, z: &Tensor) -> Result<IncrementalHiddenStates> {
        if e.shape() != z.shape() {
            return Err(Error::dim("ael_forward", e.shape(), z.shape()));
        }
        let n = e.rows();
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let ev = g.leaf(e);
        let zv = g.leaf(z);
        let f = self.ael_summary(&mut g, &p, ev, n)?;
        let h = g.incremental_states(zv, f, n)?;
        Ok(IncrementalHiddenStates {
            h: Tensor::new(&[n, n, self.config.d_model], g.value(h).to_vec())?,
            n,
        })
    }

    fn single_forward(&self, src: &[usize], tgt: &[usize], k: usize) -> Result<(Tensor, EncoderOutput)> {
        let batch = PaddedBatch::new(&[(src, tgt)])?;
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let out = self.forward_batch(&mut g, &p, &batch, k)?;
        Ok((
            g.tensor(out.logits),
            EncoderOutput {
                z: g.tensor(out.encoder),
                n: src.len(),
            },
        ))
    }

    /// Full-sentence forward: logits `[(|tgt|+1) × V]` and encoder states.
    pub fn forward_teacher(&self, src: &[usize], tgt: &[usize]) -> Result<(Tensor, EncoderOutput)> {
        if self.variant != Variant::Offline {
            return Err(Error::Contract(format!(
                "forward_teacher on a {} model",
                self.variant.name()
            )));
        }
        self.single_forward(src, tgt, 1)
    }

    /// Wait-k forward of the incremental model with all steps batched.
    pub fn forward_student(
        &self,
        src: &[usize],
        tgt: &[usize],
        schedule: &WaitKSchedule,
    ) -> Result<(Tensor, EncoderOutput)> {
        if self.variant != Variant::Incremental {
            return Err(Error::Contract(format!(
                "forward_student on a {} model",
                self.variant.name()
            )));
        }
        if schedule.src_len() != src.len() {
            return Err(Error::Schedule(format!(
                "schedule for {} tokens applied to {}",
                schedule.src_len(),
                src.len()
            )));
        }
        self.single_forward(src, tgt, schedule.k())
    }

    /// Next-token logits after `y_prefix` under the visibility history
    /// `reads`: `reads[t]` source tokens were visible when target position
    /// `t` was produced, so `reads` has one entry per prefix token plus one
    /// for the step being taken, and its last entry is `g_t`. Earlier
    /// positions need their own entries because later positions attend to
    /// the states they had when they were written.
    ///
    /// Layers below the last attend to `z[..g]`; in the incremental model
    /// the last layer attends to the slice `h[g]`.
    pub fn decode_step(
        &self,
        y_prefix: &[usize],
        z: &EncoderOutput,
        h: &IncrementalHiddenStates,
        reads: &[usize],
    ) -> Result<Tensor> {
        let n = z.n;
        if reads.len() != y_prefix.len() + 1 {
            return Err(Error::Schedule(format!(
                "{} visibility entries for a {}-token prefix",
                reads.len(),
                y_prefix.len()
            )));
        }
        if h.n != n || reads.iter().any(|&g| g == 0 || g > n) || reads.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Schedule(format!(
                "visibility {reads:?} is not a non-decreasing sequence in 1..={n}"
            )));
        }
        self.check_tokens(y_prefix, self.config.tgt_vocab)?;
        let d = self.config.d_model;
        let mut ids = Vec::with_capacity(y_prefix.len() + 1);
        ids.push(BOS);
        ids.extend_from_slice(y_prefix);
        let rows = ids.len();
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let zv = g.constant(&[n, d], z.z.values().to_vec())?;
        let hv = g.constant(&[n * n, d], h.h.values().to_vec())?;
        let mut y = self.embed(&mut g, &p, self.tgt_emb, &ids, rows, 0)?;
        let self_spans = Self::causal_spans(rows, rows);
        let prefix: Vec<KeySpan> = reads.iter().map(|&r| KeySpan::new(0, r)).collect();
        let sliced: Vec<KeySpan> = reads.iter().map(|&r| KeySpan::new((r - 1) * n, r)).collect();
        let last = self.decoder.len() - 1;
        for (l, layer) in self.decoder.iter().enumerate() {
            let normed = layer.self_norm(&mut g, &p, y)?;
            let self_kv = layer.self_attn.project_memory(&mut g, &p, normed)?;
            y = layer.self_block(&mut g, &p, y, normed, self_kv, &self_spans)?;
            let (memory, spans) = if l == last && self.variant == Variant::Incremental {
                (hv, &sliced)
            } else {
                (zv, &prefix)
            };
            let kv = layer.cross_attn.project_memory(&mut g, &p, memory)?;
            y = layer.cross_block(&mut g, &p, y, kv, spans)?;
        }
        let y = self.dec_norm.forward(&mut g, &p, y)?;
        let logits = self.output.forward(&mut g, &p, y)?;
        let v = self.config.tgt_vocab;
        Tensor::new(&[v], g.value(logits)[(rows - 1) * v..].to_vec())
    }

    /// Teacher-forced forward of any variant for a single pair.
    pub fn forward_single(&self, src: &[usize], tgt: &[usize], k: usize) -> Result<(Tensor, EncoderOutput)> {
        self.single_forward(src, tgt, k)
    }
}
