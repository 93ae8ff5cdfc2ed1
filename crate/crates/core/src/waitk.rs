//! The wait-k read/write schedule, its attention masks, decode traces and
//! the Average Lagging latency metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `g(t) = min(k + t − 1, n)`: source tokens read before writing target `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaitKSchedule {
    k: usize,
    src_len: usize,
}

impl WaitKSchedule {
    pub fn new(k: usize, src_len: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Schedule("wait parameter k must be positive".into()));
        }
        if src_len == 0 {
            return Err(Error::Schedule("source length must be positive".into()));
        }
        Ok(Self { k, src_len })
    }

    pub(crate) fn new_unchecked(k: usize, src_len: usize) -> Self {
        Self { k, src_len }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    /// `g(t)` for 1-based `t`.
    pub fn g(&self, t: usize) -> Result<usize> {
        if t == 0 {
            return Err(Error::Contract("decoding steps are numbered from 1".into()));
        }
        Ok(self.g0(t - 1))
    }

    /// `g` for a 0-based step index.
    pub fn g0(&self, step: usize) -> usize {
        (self.k + step).min(self.src_len)
    }

    pub fn values(&self, steps: usize) -> Vec<usize> {
        (0..steps).map(|s| self.g0(s)).collect()
    }
}

/// Row-major boolean masks (`true` = visible).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaitKMasks {
    pub src_len: usize,
    pub steps: usize,
    /// `[n × n]`, `i` may attend to `j` iff `j <= i`.
    pub encoder_causal: Vec<bool>,
    /// `[steps × n]`, step `t` may attend to source positions `< g(t)`.
    pub cross: Vec<bool>,
}

impl WaitKMasks {
    pub fn cross_row(&self, step: usize) -> &[bool] {
        &self.cross[step * self.src_len..(step + 1) * self.src_len]
    }

    pub fn visible_count(&self, step: usize) -> usize {
        self.cross_row(step).iter().filter(|&&b| b).count()
    }
}

pub fn build_masks(schedule: &WaitKSchedule, steps: usize) -> Result<WaitKMasks> {
    if steps == 0 {
        return Err(Error::Contract("need at least one decoding step".into()));
    }
    let n = schedule.src_len();
    let encoder_causal = (0..n * n).map(|ij| ij % n <= ij / n).collect();
    let cross = (0..steps * n).map(|tj| tj % n < schedule.g0(tj / n)).collect();
    Ok(WaitKMasks {
        src_len: n,
        steps,
        encoder_causal,
        cross,
    })
}

/// Realised read/write sequence of one decode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeTrace {
    /// Source tokens read when each target token was written.
    #[serde(rename = "g")]
    pub g_values: Vec<usize>,
    pub src_len: usize,
    pub tgt_len: usize,
    pub tokens: Vec<usize>,
}

impl DecodeTrace {
    pub fn new(src_len: usize) -> Self {
        Self {
            g_values: Vec::new(),
            src_len,
            tgt_len: 0,
            tokens: Vec::new(),
        }
    }

    pub fn push(&mut self, token: usize, read: usize) {
        self.tokens.push(token);
        self.g_values.push(read);
        self.tgt_len += 1;
    }

    pub fn is_consistent(&self) -> bool {
        self.g_values.len() == self.tgt_len
            && self.tokens.len() == self.tgt_len
            && self.g_values.windows(2).all(|w| w[0] <= w[1])
            && self.g_values.iter().all(|&g| g <= self.src_len)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serialises")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Contract(format!("bad trace record: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lagging {
    pub value: f64,
    /// Index (1-based) of the first write made with the full source read.
    pub tau: usize,
    /// The source was never fully read before decoding stopped; `tau` was
    /// taken as the target length.
    pub truncated: bool,
}

/// Average Lagging:
/// `AL = (1/τ) Σ_{i=1..τ} [ g(i) − (i−1)·|x|/|y| ]`, `τ` the first `i` with
/// `g(i) = |x|`. An empty output lags by the full source length.
pub fn average_lagging(trace: &DecodeTrace) -> Lagging {
    let n = trace.src_len;
    let m = trace.g_values.len();
    if m == 0 {
        return Lagging {
            value: n as f64,
            tau: 0,
            truncated: true,
        };
    }
    let (tau, truncated) = match trace.g_values.iter().position(|&g| g >= n) {
        Some(i) => (i + 1, false),
        None => (m, true),
    };
    let rate = m as f64 / n as f64;
    let total: f64 = trace.g_values[..tau]
        .iter()
        .enumerate()
        .map(|(i, &g)| g as f64 - i as f64 / rate)
        .sum();
    Lagging {
        value: total / tau as f64,
        tau,
        truncated,
    }
}
