//! Parallel examples: synthetic tasks with oracle alignments, plain-text
//! corpora, and length-bucketed batching.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::parse_value;
use crate::error::{Error, Result};
use crate::vocab::{Vocab, FILLER, RESERVED};

/// One sentence pair. Alignment pairs are 1-based `(target i, source j)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelExample {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub alignment: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    LaggedMap,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "lagged_map" => Ok(TaskKind::LaggedMap),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::LaggedMap => "lagged_map",
        }
    }
}

/// Synthetic task description.
///
/// Sources are drawn from a Markov chain over the content tokens: with
/// probability `successor_prob` the next token is a fixed, seed-derived
/// successor of the current one, otherwise it is uniform. Every column of
/// the transition matrix sums to one, so token frequencies stay uniform
/// while the near future of a sentence becomes partly predictable.
///
/// `map_seed` fixes the successor table (the "language"); `seed` drives
/// sampling, so training and held-out sets differ only in `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub lag: usize,
    pub successor_prob: f64,
    pub map_seed: u64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab_size: 32,
            min_len: 5,
            max_len: 12,
            lag: 2,
            successor_prob: 0.0,
            map_seed: 0,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "task" => self.kind = TaskKind::parse(value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "min_src_len" => self.min_len = parse_value(key, value)?,
            "max_src_len" => self.max_len = parse_value(key, value)?,
            "lag" => self.lag = parse_value(key, value)?,
            "successor_prob" => self.successor_prob = parse_value(key, value)?,
            "map_seed" => self.map_seed = parse_value(key, value)?,
            "data_seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for content tokens after {RESERVED} reserved ids",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.successor_prob) {
            return Err(Error::Config("successor_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Output vocabulary: decimal ids after the reserved entries.
    pub fn vocab(&self) -> Vocab {
        Vocab::numeric(self.vocab_size)
    }

    /// Source position (1-based) that target position `i` copies.
    pub fn aligned_source(&self, i: usize, n: usize) -> usize {
        match self.kind {
            TaskKind::Copy => i,
            TaskKind::LaggedMap => (i + self.lag).min(n),
        }
    }
}

/// Deterministic examples for `spec`; the same spec and count always give
/// the same list, and a longer list extends a shorter one.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, count: usize) -> Result<Vec<ParallelExample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Contract("count must be at least 1".into()));
    }
    let content: Vec<usize> = (RESERVED..spec.vocab_size).collect();
    let mut successor = content.clone();
    successor.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.map_seed));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = rng.gen_range(spec.min_len..=spec.max_len);
        let mut src = Vec::with_capacity(n);
        let mut tok = content[rng.gen_range(0..content.len())];
        src.push(tok);
        while src.len() < n {
            tok = if rng.gen_bool(spec.successor_prob) {
                successor[tok - RESERVED]
            } else {
                content[rng.gen_range(0..content.len())]
            };
            src.push(tok);
        }
        let (tgt, alignment) = match spec.kind {
            TaskKind::Copy => (src.clone(), (1..=n).map(|i| (i, i)).collect()),
            TaskKind::LaggedMap => {
                let tgt = (1..=n)
                    .map(|i| {
                        if i + spec.lag <= n {
                            src[i + spec.lag - 1]
                        } else {
                            FILLER
                        }
                    })
                    .collect();
                (tgt, (1..=n).map(|i| (i, (i + spec.lag).min(n))).collect())
            }
        };
        out.push(ParallelExample {
            src,
            tgt,
            alignment: Some(alignment),
        });
    }
    Ok(out)
}

/// A tokenised text corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub examples: Vec<ParallelExample>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    /// Line pairs dropped because one side was empty.
    pub skipped: usize,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn count_words<'a>(lines: impl Iterator<Item = &'a str>) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for w in lines.flat_map(str::split_whitespace) {
        *counts.entry(w.to_string()).or_insert(0) += 1;
    }
    counts
}

/// Loads two line-aligned, whitespace-tokenised files.
pub fn load_corpus(src_path: &Path, tgt_path: &Path) -> Result<Corpus> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Ingestion(format!(
            "{} has {} lines but {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    let keep: Vec<bool> = src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| !s.trim().is_empty() && !t.trim().is_empty())
        .collect();
    let skipped = keep.iter().filter(|&&k| !k).count();
    let kept = |lines: &[String]| -> Vec<String> {
        lines
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(l, _)| l.clone())
            .collect()
    };
    let (src, tgt) = (kept(&src), kept(&tgt));
    let src_vocab = Vocab::from_counts(&count_words(src.iter().map(String::as_str)));
    let tgt_vocab = Vocab::from_counts(&count_words(tgt.iter().map(String::as_str)));
    let examples = src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| ParallelExample {
            src: src_vocab.encode(s),
            tgt: tgt_vocab.encode(t),
            alignment: None,
        })
        .collect();
    Ok(Corpus {
        examples,
        src_vocab,
        tgt_vocab,
        skipped,
    })
}

/// Shuffles, groups examples of similar source length, and returns batches
/// of indices in random order. Pools of `16 · batch_size` examples are
/// sorted by length before being cut into batches.
pub fn bucketed_batches<R: Rng + ?Sized>(
    examples: &[ParallelExample],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for pool in order.chunks(batch_size * 16) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| examples[i].src.len());
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}
