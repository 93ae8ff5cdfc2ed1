//! Forward-pass cost of the recompute baseline, the incremental encoder
//! with AEL, and the offline model: wall time and multiply-accumulate
//! counts from the instrumented matrix kernels.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PaddedBatch, Seq2Seq, Variant};
use crate::tape::Graph;
use crate::tensor::macs;
use crate::vocab::RESERVED;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchVariant {
    BaselineBi,
    IncrementalAel,
    Offline,
}

impl BenchVariant {
    pub const ALL: [BenchVariant; 3] = [
        BenchVariant::BaselineBi,
        BenchVariant::IncrementalAel,
        BenchVariant::Offline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchVariant::BaselineBi => "baseline_bi",
            BenchVariant::IncrementalAel => "incremental_ael",
            BenchVariant::Offline => "offline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline_bi" => Ok(BenchVariant::BaselineBi),
            "incremental_ael" => Ok(BenchVariant::IncrementalAel),
            "offline" => Ok(BenchVariant::Offline),
            other => Err(Error::Config(format!("unknown bench variant {other:?}"))),
        }
    }

    pub fn model_variant(self) -> Variant {
        match self {
            BenchVariant::BaselineBi => Variant::Recompute,
            BenchVariant::IncrementalAel => Variant::Incremental,
            BenchVariant::Offline => Variant::Offline,
        }
    }
}

impl fmt::Display for BenchVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub variant: BenchVariant,
    pub n: usize,
    /// Decoder steps (target length plus the end-of-sentence step).
    pub t: usize,
    pub k: usize,
    pub batch: usize,
    pub median_secs: f64,
    /// Multiply-accumulates of one whole forward pass.
    pub mac_count: u64,
    /// Multiply-accumulates of the source side alone (embedding through
    /// the final encoder states, plus the AEL summary for the incremental model).
    pub encoder_macs: u64,
    pub trials: usize,
}

impl BenchResult {
    pub const CSV_HEADER: &'static str = "variant,n,T,k,median_secs,mac_count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.variant, self.n, self.t, self.k, self.median_secs, self.mac_count
        )
    }
}

pub fn to_csv(rows: &[BenchResult]) -> String {
    let mut s = format!("{}\n", BenchResult::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Shape of one timed forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub model: ModelConfig,
    pub n: usize,
    /// Decoder steps; the target has `t − 1` tokens.
    pub t: usize,
    pub k: usize,
    pub batch: usize,
    pub trials: usize,
    pub seed: u64,
}

impl BenchSpec {
    /// The reference setting: `d_model = 64`, two layers, two heads, `n = T`.
    pub fn standard(n: usize, k: usize) -> Self {
        Self {
            model: ModelConfig {
                n_layers: 2,
                d_model: 64,
                n_heads: 2,
                d_ff: 256,
                src_vocab: 32,
                tgt_vocab: 32,
                max_len: n.max(1) + 8,
                k,
            },
            n,
            t: n,
            k,
            batch: 1,
            trials: 5,
            seed: 0,
        }
    }
}

fn random_batch(spec: &BenchSpec) -> Result<PaddedBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = spec.model.src_vocab.min(spec.model.tgt_vocab);
    let mut draw = |len: usize| -> Vec<usize> { (0..len).map(|_| rng.gen_range(RESERVED..vocab)).collect() };
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..spec.batch).map(|_| (draw(spec.n), draw(spec.t - 1))).collect();
    PaddedBatch::new(&pairs)
}

/// Source-side MACs: embedding, encoder stack, and for the incremental
/// model the AEL running-mean projection.
pub fn encoder_macs(model: &Seq2Seq, batch: &PaddedBatch, k: usize) -> Result<u64> {
    let mut g = Graph::inference();
    let p = model.bind(&mut g, false);
    let n = batch.src_block;
    let (res, count) = macs::measure(|| -> Result<()> {
        let e = model.embed_source(&mut g, &p, &batch.src_ids, n)?;
        match model.variant {
            Variant::Offline => {
                model.encode_bidirectional_batch(&mut g, &p, e, &batch.src_lens, n)?;
            }
            Variant::Incremental => {
                model.encode_unidirectional_batch(&mut g, &p, e, n)?;
                model.ael_summary(&mut g, &p, e, n)?;
            }
            Variant::Recompute => {
                model.encode_recompute_batch(&mut g, &p, e, &batch.src_lens, n, batch.tgt_block, k)?;
            }
        }
        Ok(())
    });
    res?;
    Ok(count)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

struct Prepared {
    model: Seq2Seq,
    batch: PaddedBatch,
    mac_count: u64,
}

impl Prepared {
    fn new(variant: BenchVariant, spec: &BenchSpec) -> Result<Self> {
        if spec.n == 0 || spec.t == 0 || spec.batch == 0 {
            return Err(Error::Config("bench needs positive n, T and batch".into()));
        }
        let model = Seq2Seq::new(spec.model.clone(), variant.model_variant(), spec.seed)?;
        let batch = random_batch(spec)?;
        let mut p = Self {
            model,
            batch,
            mac_count: 0,
        };
        // The first pass doubles as the warm-up.
        p.mac_count = p.run(spec.k)?;
        Ok(p)
    }

    fn run(&self, k: usize) -> Result<u64> {
        let mut g = Graph::inference();
        let p = self.model.bind(&mut g, false);
        let (out, count) = macs::measure(|| self.model.forward_batch(&mut g, &p, &self.batch, k));
        out?;
        Ok(count)
    }
}

/// One warm-up pass, then the median wall time of `spec.trials` timed
/// forward passes (at least five).
pub fn bench_forward(variant: BenchVariant, spec: &BenchSpec) -> Result<BenchResult> {
    let mut rows = bench_interleaved(&[(variant, spec.clone())])?;
    Ok(rows.remove(0))
}

/// Times several configurations with their trials taken round-robin, so
/// slow drift in machine speed lands on every configuration alike. Each
/// result is the median of its own trials.
pub fn bench_interleaved(configs: &[(BenchVariant, BenchSpec)]) -> Result<Vec<BenchResult>> {
    let prepared = configs
        .iter()
        .map(|(v, s)| Prepared::new(*v, s))
        .collect::<Result<Vec<_>>>()?;
    let trials = configs.iter().map(|(_, s)| s.trials.max(5)).max().unwrap_or(5);
    let mut times = vec![Vec::with_capacity(trials); configs.len()];
    for _ in 0..trials {
        for ((p, (_, spec)), out) in prepared.iter().zip(configs).zip(&mut times) {
            let start = Instant::now();
            let c = p.run(spec.k)?;
            out.push(start.elapsed().as_secs_f64());
            debug_assert_eq!(c, p.mac_count);
        }
    }
    prepared
        .iter()
        .zip(configs)
        .zip(&mut times)
        .map(|((p, (variant, spec)), t)| {
            Ok(BenchResult {
                variant: *variant,
                n: spec.n,
                t: spec.t,
                k: spec.k,
                batch: spec.batch,
                median_secs: median(t),
                mac_count: p.mac_count,
                encoder_macs: encoder_macs(&p.model, &p.batch, spec.k)?,
                trials,
            })
        })
        .collect()
}

/// All three variants for every `(n, k)` pair, with `T = n`, interleaved per
/// `n`. `base` supplies the model shape, batch size, trial count and seed.
pub fn scaling_sweep(base: &BenchSpec, n_values: &[usize], k_values: &[usize]) -> Result<Vec<BenchResult>> {
    let mut out = Vec::new();
    for &n in n_values {
        let mut configs = Vec::new();
        for &k in k_values {
            let spec = BenchSpec {
                model: ModelConfig {
                    max_len: base.model.max_len.max(n + 8),
                    k,
                    ..base.model.clone()
                },
                n,
                t: n,
                k,
                ..base.clone()
            };
            for v in BenchVariant::ALL {
                configs.push((v, spec.clone()));
            }
        }
        out.extend(bench_interleaved(&configs)?);
    }
    Ok(out)
}

/// Closed-form multiply-accumulate count of the offline model's encoder for
/// one sentence of length `n`.
pub fn offline_encoder_macs(c: &ModelConfig, n: usize) -> u64 {
    let (n, d, ff) = (n as u64, c.d_model as u64, c.d_ff as u64);
    c.n_layers as u64 * (4 * n * d * d + 2 * n * n * d + 2 * n * d * ff)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, k: usize) -> BenchSpec {
        let mut s = BenchSpec::standard(n, k);
        s.model.d_model = 16;
        s.model.d_ff = 32;
        s
    }

    #[test]
    fn offline_encoder_matches_closed_form() {
        let spec = tiny(7, 1);
        let model = Seq2Seq::new(spec.model.clone(), Variant::Offline, 0).unwrap();
        let batch = random_batch(&spec).unwrap();
        assert_eq!(
            encoder_macs(&model, &batch, 1).unwrap(),
            offline_encoder_macs(&spec.model, 7)
        );
    }

    #[test]
    fn baseline_is_t_offline_passes_at_k1() {
        let spec = tiny(8, 1);
        let base = bench_forward(BenchVariant::BaselineBi, &spec).unwrap();
        assert_eq!(base.encoder_macs, 8 * offline_encoder_macs(&spec.model, 8));
    }

    #[test]
    fn incremental_encoder_is_causal_pass_plus_ael() {
        let spec = tiny(9, 2);
        let model = Seq2Seq::new(spec.model.clone(), Variant::Incremental, 0).unwrap();
        let batch = random_batch(&spec).unwrap();
        let mut g = Graph::inference();
        let p = model.bind(&mut g, false);
        let (_, causal) = macs::measure(|| {
            let e = model.embed_source(&mut g, &p, &batch.src_ids, 9).unwrap();
            model.encode_unidirectional_batch(&mut g, &p, e, 9).unwrap();
        });
        let (n, d) = (9u64, spec.model.d_model as u64);
        // Cumulative mean as a lower-triangular product, then one d×d
        // projection per token.
        let ael = n * n * d + n * d * d;
        assert_eq!(encoder_macs(&model, &batch, 2).unwrap(), causal + ael);
    }

    #[test]
    fn interleaved_results_keep_their_order() {
        let configs: Vec<_> = [1, 3]
            .iter()
            .flat_map(|&k| BenchVariant::ALL.map(|v| (v, tiny(6, k))))
            .collect();
        let rows = bench_interleaved(&configs).unwrap();
        for ((v, spec), r) in configs.iter().zip(&rows) {
            assert_eq!((r.variant, r.k), (*v, spec.k));
            assert_eq!(r.mac_count, bench_forward(*v, spec).unwrap().mac_count);
            assert!(r.median_secs > 0.0 && r.trials >= 5);
        }
        // Fewer distinct prefixes to re-encode at the larger k.
        assert!(rows[3].encoder_macs < rows[0].encoder_macs);
    }

    #[test]
    fn unknown_variant_is_a_config_error() {
        assert!(matches!(BenchVariant::parse("fast"), Err(Error::Config(_))));
    }
}
