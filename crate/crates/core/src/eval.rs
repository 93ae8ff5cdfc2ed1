//! Translation quality and latency: BLEU, Average Lagging, Absent/Present
//! 1-gram accuracy, encoder-state distance and the train-k/test-k matrix.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use crate::decode::{default_max_len, streaming_decode, Decoded};
use crate::error::{Error, Result};
use crate::model::{Seq2Seq, Variant};
use crate::training::ParallelExample;
use crate::waitk::average_lagging;

pub const MAX_ORDER: usize = 4;
/// Precision used in place of an empty higher-order n-gram match at
/// sentence level.
pub const SMOOTHING_EPS: f64 = 1e-9;

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram totals per order, plus lengths.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct BleuStats {
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    cand_len: usize,
    ref_len: usize,
}

fn sentence_stats<T: Eq + Hash + Clone>(cand: &[T], refs: &[Vec<T>]) -> BleuStats {
    let mut s = BleuStats {
        cand_len: cand.len(),
        ..Default::default()
    };
    // Closest reference length, ties toward the shorter one.
    s.ref_len = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(cand.len()), r))
        .unwrap_or(0);
    for n in 1..=MAX_ORDER {
        let c = ngram_counts(cand, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in refs {
            for (g, cnt) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(cnt);
            }
        }
        s.matches[n - 1] = c
            .iter()
            .map(|(g, &cnt)| cnt.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        s.totals[n - 1] = cand.len().saturating_sub(n - 1);
    }
    s
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Corpus-level 4-gram BLEU on a 0–100 scale, from raw corpus counts. Any
/// order without a single match gives 0.
pub fn corpus_bleu<T: Eq + Hash + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Contract("corpus_bleu needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates but {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("sentence {i} has no reference")));
    }
    let mut total = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        let s = sentence_stats(c, r);
        for n in 0..MAX_ORDER {
            total.matches[n] += s.matches[n];
            total.totals[n] += s.totals[n];
        }
        total.cand_len += s.cand_len;
        total.ref_len += s.ref_len;
    }
    if total.matches.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_ORDER)
        .map(|n| (total.matches[n] as f64 / total.totals[n] as f64).ln())
        .sum::<f64>()
        / MAX_ORDER as f64;
    Ok(100.0 * brevity_penalty(total.cand_len, total.ref_len) * log_p.exp())
}

/// Sentence-level BLEU. Orders two and up with no match use
/// [`SMOOTHING_EPS`] as their precision; no unigram match gives 0.
pub fn sentence_bleu<T: Eq + Hash + Clone>(candidate: &[T], references: &[Vec<T>]) -> f64 {
    let s = sentence_stats(candidate, references);
    if s.matches[0] == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..MAX_ORDER)
        .map(|n| {
            if s.matches[n] == 0 {
                SMOOTHING_EPS.ln()
            } else {
                (s.matches[n] as f64 / s.totals[n] as f64).ln()
            }
        })
        .sum::<f64>()
        / MAX_ORDER as f64;
    100.0 * brevity_penalty(s.cand_len, s.ref_len) * log_p.exp()
}

/// Positions (0-based) of generated tokens whose aligned source had or had
/// not been read when they were written.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PresentAbsent {
    pub present: Vec<usize>,
    pub absent: Vec<usize>,
}

/// Generated token `i` (1-based) aligned to source `j` is Present iff
/// `j ≤ min(i + k − 1, n)`. Positions past the end of the alignment reuse
/// its last entry. Returns `None` when there is no alignment.
pub fn present_absent_split(
    alignment: Option<&[(usize, usize)]>,
    generated_len: usize,
    src_len: usize,
    k: usize,
) -> Option<PresentAbsent> {
    let alignment = alignment.filter(|a| !a.is_empty())?;
    let mut by_target: Vec<usize> = Vec::new();
    for &(i, j) in alignment {
        if by_target.len() < i {
            by_target.resize(i, j);
        }
        by_target[i - 1] = j;
    }
    let last = *by_target.last().expect("non-empty alignment");
    let mut out = PresentAbsent::default();
    for pos in 0..generated_len {
        let i = pos + 1;
        let j = by_target.get(pos).copied().unwrap_or(last);
        if j <= (i + k - 1).min(src_len) {
            out.present.push(pos);
        } else {
            out.absent.push(pos);
        }
    }
    Some(out)
}

/// Clipped unigram matches of a token set against a reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OneGramTally {
    pub matched: usize,
    pub total: usize,
}

impl OneGramTally {
    pub fn of<T: Eq + Hash>(tokens: &[T], reference: &[T]) -> Self {
        let mut avail: HashMap<&T, usize> = HashMap::new();
        for t in reference {
            *avail.entry(t).or_insert(0) += 1;
        }
        let mut matched = 0;
        for t in tokens {
            if let Some(c) = avail.get_mut(t) {
                if *c > 0 {
                    *c -= 1;
                    matched += 1;
                }
            }
        }
        Self {
            matched,
            total: tokens.len(),
        }
    }

    pub fn add(&mut self, other: Self) {
        self.matched += other.matched;
        self.total += other.total;
    }

    /// `None` for an empty set.
    pub fn score(&self) -> Option<f64> {
        (self.total > 0).then(|| self.matched as f64 / self.total as f64)
    }
}

/// Clipped unigram precision of `tokens` against `reference`; `None` for an
/// empty set.
pub fn one_gram_score<T: Eq + Hash>(tokens: &[T], reference: &[T]) -> Option<f64> {
    OneGramTally::of(tokens, reference).score()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub sentences: usize,
    pub corpus_bleu: f64,
    pub mean_al: f64,
    /// Traces that stopped before the source was fully read.
    pub truncated: usize,
    pub absent_1gram: Option<f64>,
    pub present_1gram: Option<f64>,
    pub mean_hidden_l2: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "sentences,corpus_bleu,mean_al,truncated,absent_1gram,present_1gram,mean_hidden_l2";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.sentences,
            self.corpus_bleu,
            self.mean_al,
            self.truncated,
            opt(self.absent_1gram),
            opt(self.present_1gram),
            opt(self.mean_hidden_l2)
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Report plus the per-sentence decodes it was computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub decodes: Vec<Decoded>,
}

/// Streams every source through `model` under wait-`k` and scores the output.
pub fn evaluate_model(model: &Seq2Seq, data: &[ParallelExample], k: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let mut decodes = Vec::with_capacity(data.len());
    let mut al_sum = 0.0;
    let mut truncated = 0;
    let mut absent = OneGramTally::default();
    let mut present = OneGramTally::default();
    let mut any_alignment = false;
    for ex in data {
        let out = streaming_decode(model, &ex.src, k, default_max_len(ex.src.len()))?;
        let lag = average_lagging(&out.trace);
        al_sum += lag.value;
        truncated += usize::from(lag.truncated);
        let split_k = if model.variant == Variant::Offline {
            ex.src.len()
        } else {
            k
        };
        if let Some(split) = present_absent_split(ex.alignment.as_deref(), out.tokens.len(), ex.src.len(), split_k) {
            any_alignment = true;
            let pick = |idx: &[usize]| idx.iter().map(|&p| out.tokens[p]).collect::<Vec<_>>();
            absent.add(OneGramTally::of(&pick(&split.absent), &ex.tgt));
            present.add(OneGramTally::of(&pick(&split.present), &ex.tgt));
        }
        decodes.push(out);
    }
    let candidates: Vec<Vec<usize>> = decodes.iter().map(|d| d.tokens.clone()).collect();
    let references: Vec<Vec<Vec<usize>>> = data.iter().map(|e| vec![e.tgt.clone()]).collect();
    let report = EvalReport {
        sentences: data.len(),
        corpus_bleu: corpus_bleu(&candidates, &references)?,
        mean_al: al_sum / data.len() as f64,
        truncated,
        absent_1gram: if any_alignment { absent.score() } else { None },
        present_1gram: if any_alignment { present.score() } else { None },
        mean_hidden_l2: None,
    };
    Ok(Evaluation { report, decodes })
}

fn encoder_states(model: &Seq2Seq, src: &[usize]) -> Result<crate::Tensor> {
    Ok(match model.variant {
        Variant::Incremental => model.encode_unidirectional(src)?.z,
        Variant::Offline | Variant::Recompute => model.encode_bidirectional(src)?.z,
    })
}

/// Mean over sentences of `(1/n) Σ_i ‖a_i − b_i‖²` between the two models'
/// final encoder states (causal for an incremental model, bidirectional
/// otherwise).
pub fn hidden_distance_stats(a: &Seq2Seq, b: &Seq2Seq, data: &[ParallelExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("distance over an empty set".into()));
    }
    if a.config.src_vocab != b.config.src_vocab || a.config.d_model != b.config.d_model {
        return Err(Error::Contract(
            "models do not share source vocabulary and width".into(),
        ));
    }
    let mut total = 0.0;
    for ex in data {
        let za = encoder_states(a, &ex.src)?;
        let zb = encoder_states(b, &ex.src)?;
        let d = za.cols();
        let n = za.rows();
        let sq: f64 = za
            .values()
            .iter()
            .zip(zb.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        debug_assert_eq!(za.numel(), n * d);
        total += sq / n as f64;
    }
    Ok(total / data.len() as f64)
}

/// BLEU of each train-k model decoded under each test-k.
#[derive(Debug, Clone, PartialEq)]
pub struct KMatrix {
    pub train_ks: Vec<usize>,
    pub test_ks: Vec<usize>,
    /// `bleu[r][c]`: model trained at `train_ks[r]`, tested at `test_ks[c]`.
    pub bleu: Vec<Vec<f64>>,
}

impl KMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("train_k");
        for k in &self.test_ks {
            let _ = write!(s, ",test_k{k}");
        }
        s.push('\n');
        for (k, row) in self.train_ks.iter().zip(&self.bleu) {
            let _ = write!(s, "{k}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Whether each test column reaches its maximum at some train-k that is
    /// at least the test-k.
    pub fn columns_peak_at_or_above_diagonal(&self) -> bool {
        (0..self.test_ks.len()).all(|c| {
            let best = self.bleu.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
            self.train_ks
                .iter()
                .zip(&self.bleu)
                .any(|(&tk, r)| tk >= self.test_ks[c] && r[c] == best)
        })
    }
}

pub fn k_matrix(models: &[(usize, &Seq2Seq)], test_ks: &[usize], data: &[ParallelExample]) -> Result<KMatrix> {
    let mut bleu = Vec::with_capacity(models.len());
    for (_, m) in models {
        let row = test_ks
            .iter()
            .map(|&k| evaluate_model(m, data, k).map(|e| e.report.corpus_bleu))
            .collect::<Result<Vec<_>>>()?;
        bleu.push(row);
    }
    Ok(KMatrix {
        train_ks: models.iter().map(|(k, _)| *k).collect(),
        test_ks: test_ks.to_vec(),
        bleu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        let c = words("a b c d e");
        assert_eq!(corpus_bleu(&[c.clone()], &[vec![c.clone()]]).unwrap(), 100.0);
        assert_eq!(corpus_bleu(&[words("x y z w")], &[vec![c]]).unwrap(), 0.0);
        let s = sentence_bleu(&words("the cat sat"), &[words("the cat sat down")]);
        let expected = 100.0 * SMOOTHING_EPS.powf(0.25) * (1.0f64 - 4.0 / 3.0).exp();
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
        assert!(corpus_bleu::<usize>(&[], &[]).is_err());
    }

    #[test]
    fn closest_reference_ties_toward_shorter() {
        let s = sentence_stats(&[1, 2, 3, 4], &[vec![1, 2, 3], vec![1, 2, 3, 4, 5]]);
        assert_eq!(s.ref_len, 3);
    }

    #[test]
    fn split_examples() {
        let diag: Vec<_> = (1..=5).map(|i| (i, i)).collect();
        let s = present_absent_split(Some(&diag), 5, 5, 5).unwrap();
        assert_eq!(s.absent.len(), 0);
        let lag: Vec<_> = (1..=6).map(|i| (i, (i + 2).min(6))).collect();
        let s = present_absent_split(Some(&lag), 6, 6, 1).unwrap();
        assert_eq!(s.absent, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.present, vec![5]);
        assert!(present_absent_split(None, 3, 3, 1).is_none());
    }

    #[test]
    fn one_gram_examples() {
        assert_eq!(one_gram_score(&[1, 2], &[2, 1, 3]), Some(1.0));
        assert_eq!(one_gram_score(&[7, 8], &[1, 2]), Some(0.0));
        assert_eq!(one_gram_score(&[1, 9], &[1, 2]), Some(0.5));
        assert_eq!(one_gram_score(&[1, 1], &[1, 2]), Some(0.5));
        assert_eq!(one_gram_score::<usize>(&[], &[1]), None);
    }
}
