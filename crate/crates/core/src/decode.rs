//! Greedy simultaneous decoding.
//!
//! [`streaming_decode`] drives a [`StreamingSession`] token by token;
//! [`batch_greedy_decode`] reaches the same output by rerunning the
//! teacher-forced batched forward pass on the growing prefix. Both share one
//! token selection rule, so their outputs can be compared exactly.

use crate::error::{Error, Result};
use crate::model::{Seq2Seq, StreamingSession, Variant};
use crate::vocab::{BOS, EOS, PAD};
use crate::waitk::{DecodeTrace, WaitKSchedule};

/// Tail policy: decode at most `2·n + 5` tokens.
pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 5
}

/// Argmax over the target vocabulary. Padding and BOS are never emitted, and
/// EOS only once the whole source has been read. Ties go to the lower id.
pub fn select_token(logits: &[f64], source_done: bool) -> usize {
    let mut best = None;
    for (id, &v) in logits.iter().enumerate() {
        if id == PAD || id == BOS || (id == EOS && !source_done) {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((id, v)),
        }
    }
    best.map_or(EOS, |(id, _)| id)
}

fn schedule_for(model: &Seq2Seq, src_len: usize, k: usize) -> Result<WaitKSchedule> {
    match model.variant {
        Variant::Offline => WaitKSchedule::new(src_len, src_len),
        _ => WaitKSchedule::new(k, src_len),
    }
}

/// Output of one decode, including the source positions visible at each write.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub trace: DecodeTrace,
    pub access_log: Vec<usize>,
}

/// Reads `k` tokens, then alternates write and read until the source is
/// exhausted, then writes until EOS or `max_len` tokens. The offline
/// model reads the whole source before its first write.
pub fn streaming_decode(model: &Seq2Seq, src: &[usize], k: usize, max_len: usize) -> Result<Decoded> {
    streaming_decode_with(model, src, k, max_len, |_| Ok(()))
}

/// A read or a write, reported as it happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamEvent {
    Read(usize),
    Write(usize),
}

/// [`streaming_decode`] with a callback invoked after every read and every
/// emitted token, in order. An error from the callback aborts the decode.
pub fn streaming_decode_with(
    model: &Seq2Seq,
    src: &[usize],
    k: usize,
    max_len: usize,
    mut on_event: impl FnMut(StreamEvent) -> Result<()>,
) -> Result<Decoded> {
    if src.is_empty() {
        return Err(Error::Contract("cannot decode an empty source".into()));
    }
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let n = src.len();
    let schedule = schedule_for(model, n, k)?;
    let mut session = StreamingSession::new(model);
    let mut trace = DecodeTrace::new(n);
    let mut prev = BOS;
    for step in 0..max_len {
        let need = schedule.g0(step);
        while session.read_count() < need {
            let tok = src[session.read_count()];
            session.read(tok)?;
            on_event(StreamEvent::Read(tok))?;
        }
        let logits = session.write(prev)?;
        let token = select_token(&logits, need == n);
        if token == EOS {
            break;
        }
        trace.push(token, need);
        on_event(StreamEvent::Write(token))?;
        prev = token;
    }
    Ok(Decoded {
        tokens: trace.tokens.clone(),
        trace,
        access_log: session.access_log().to_vec(),
    })
}

/// Same policy as [`streaming_decode`], computed with one full batched
/// forward pass per emitted token.
pub fn batch_greedy_decode(model: &Seq2Seq, src: &[usize], k: usize, max_len: usize) -> Result<Decoded> {
    if src.is_empty() {
        return Err(Error::Contract("cannot decode an empty source".into()));
    }
    let n = src.len();
    let schedule = schedule_for(model, n, k)?;
    let mut trace = DecodeTrace::new(n);
    let mut tokens: Vec<usize> = Vec::new();
    let mut access_log = Vec::new();
    for step in 0..max_len {
        let need = schedule.g0(step);
        let (logits, _) = model.forward_single(src, &tokens, schedule.k())?;
        let v = logits.cols();
        let row = &logits.values()[step * v..(step + 1) * v];
        access_log.push(need);
        let token = select_token(row, need == n);
        if token == EOS {
            break;
        }
        trace.push(token, need);
        tokens.push(token);
    }
    Ok(Decoded {
        tokens,
        trace,
        access_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_skips_reserved_ids() {
        let logits = [9.0, 8.0, 7.0, 1.0, 2.0];
        assert_eq!(select_token(&logits, false), 4);
        assert_eq!(select_token(&logits, true), EOS);
        assert_eq!(select_token(&[0.0, 0.0, 0.0, 1.0, 1.0], true), 3);
    }
}
