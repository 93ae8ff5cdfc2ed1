//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is an arena: every operation appends one node holding its
//! output value and the rule needed to push gradients back to its inputs.
//! [`Var`] is a cheap handle into that arena. Parameters enter the graph as
//! leaves copied from [`Tensor`]s, and gradients are read back out after
//! [`Graph::backward`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{macs, matmul_at_acc, matmul_bt_acc, matmul_into, Tensor};

/// Additive constant applied to masked attention scores before normalising.
pub const MASK_FILL: f64 = -1e9;

/// Variance floor inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous block of key rows visible to one query row of [`Graph::attention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KeySpan {
    pub start: usize,
    pub len: usize,
}

impl KeySpan {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    GatherRows(Var, Rc<[usize]>),
    SliceCols(Var, usize),
    ConcatCols(Rc<[Var]>),
    SliceRows(Var, usize),
    ConcatRows(Rc<[Var]>),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        // per-row (mean, inverse std)
        stats: Rc<[(f64, f64)]>,
    },
    MaskedSoftmax(Var),
    CumulativeMean(Var, usize),
    IncrementalStates {
        z: Var,
        f: Var,
        block: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spans: Rc<[KeySpan]>,
        heads: usize,
        scale: f64,
        probs: Rc<[f64]>,
    },
    CrossEntropy {
        logits: Var,
        targets: Rc<[usize]>,
        keep: Rc<[bool]>,
        probs: Rc<[f64]>,
        count: usize,
    },
    L2Distance {
        a: Var,
        b: Var,
        keep: Rc<[bool]>,
        count: usize,
    },
}

impl Op {
    fn is_leaf(&self) -> bool {
        matches!(self, Op::Leaf)
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Operation tape. With recording disabled every result is a constant and
/// nothing is kept for the backward pass; values are computed identically.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph that evaluates without recording backward rules.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of non-leaf operations recorded.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| !n.op.is_leaf()).count()
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).values
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.node(v).grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn rows(&self, v: Var) -> usize {
        let s = self.shape(v);
        numel(s) / s[s.len() - 1]
    }

    pub fn cols(&self, v: Var) -> usize {
        *self.shape(v).last().expect("shape")
    }

    /// Copy of the node as a standalone tensor (value and gradient).
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        let mut t = Tensor::new(&n.shape, n.values.clone()).expect("node shape");
        if !n.grad.is_empty() {
            t.grad_mut().copy_from_slice(&n.grad);
        }
        t.requires_grad = n.requires_grad;
        t
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        let requires_grad = self.recording && inputs.iter().any(|&v| self.node(v).requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            values,
            grad: Vec::new(),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; gradients are tracked when the tensor
    /// requires them and the graph is recording.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
            grad: Vec::new(),
            requires_grad: self.recording && t.requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        if numel(shape) != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("constant", shape, &[values.len()]));
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            values,
            grad: Vec::new(),
            requires_grad: false,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let values = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), values, Op::Add(a, b), &[a, b]))
    }

    /// `a[..×d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.cols(a);
        if numel(self.shape(b)) != d {
            return Err(Error::dim("add_row", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b);
        let values = self
            .value(a)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), values, Op::AddRow(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let values = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), values, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let values = self.value(a).iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), values, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let values = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), values, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * q];
        matmul_into(self.value(a), self.value(b), &mut out, m, p, q);
        Ok(self.push(vec![m, q], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[2]));
        }
        let (m, n) = (s[0], s[1]);
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a), &[a]))
    }

    /// `x · w + b` for `x[R×i]`, `w[i×o]`, `b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ----- indexing and reshaping -----

    /// Rows of a 2-D `table` selected by `indices` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", s, &[2]));
        }
        let (rows, d) = (s[0], s[1]);
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                extent: rows,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::GatherRows(table, indices.into()),
            &[table],
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.cols(a);
        if len == 0 || start + len > d {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, len]));
        }
        let rows = self.rows(a);
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av[r * d + start..r * d + start + len]);
        }
        Ok(self.push(vec![rows, len], out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.rows(first);
        for &p in parts {
            if self.rows(p) != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.into()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let rows = self.rows(a);
        if len == 0 || start + len > rows {
            return Err(Error::dim("slice_rows", self.shape(a), &[start, len]));
        }
        let d = self.cols(a);
        let out = self.value(a)[start * d..(start + len) * d].to_vec();
        Ok(self.push(vec![len, d], out, Op::SliceRows(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let d = self.cols(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.cols(p) != d {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += self.rows(p);
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, d], out, Op::ConcatRows(parts.into()), parts))
    }

    // ----- normalisation -----

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.cols(x);
        if numel(self.shape(gain)) != d || numel(self.shape(bias)) != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(numel(self.shape(x)));
        let mut stats = Vec::with_capacity(self.rows(x));
        for row in self.value(x).chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            stats.push((mean, inv));
            for c in 0..d {
                out.push((row[c] - mean) * inv * gv[c] + bv[c]);
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats: stats.into(),
            },
            &[x, gain, bias],
        ))
    }

    /// Softmax over the last axis where `keep[i % keep.len()]` is false
    /// positions get [`MASK_FILL`] added first. Masked outputs are exactly
    /// zero; a row with nothing kept is all zeros.
    pub fn masked_softmax(&mut self, scores: Var, keep: &[bool]) -> Result<Var> {
        let n = self.cols(scores);
        let total = numel(self.shape(scores));
        if keep.is_empty() || keep.len() % n != 0 || total % keep.len() != 0 {
            return Err(Error::dim("masked_softmax", self.shape(scores), &[keep.len()]));
        }
        let mut out = vec![0.0; total];
        let sv = self.value(scores);
        for (r, row) in sv.chunks(n).enumerate() {
            let base = (r * n) % keep.len();
            let mask = &keep[base..base + n];
            softmax_row_masked(row, mask, &mut out[r * n..(r + 1) * n]);
        }
        Ok(self.push(self.shape(scores).to_vec(), out, Op::MaskedSoftmax(scores), &[scores]))
    }

    /// Running mean over consecutive rows, restarting every `block` rows:
    /// `out[i] = mean(x[b..=i])` where `b` is the start of i's block.
    ///
    /// Evaluated in parallel as a product with the lower-triangular mask
    /// matrix (a cumulative sum) followed by division of row `i` by `i + 1`,
    /// which matches a running sum divided by its count bit for bit.
    pub fn masked_cumulative_mean(&mut self, x: Var, block: usize) -> Result<Var> {
        let rows = self.rows(x);
        if block == 0 || rows % block != 0 {
            return Err(Error::dim("masked_cumulative_mean", self.shape(x), &[block]));
        }
        let d = self.cols(x);
        let m = lower_triangular_ones(block);
        let xv = self.value(x);
        let mut out = vec![0.0; rows * d];
        for b in 0..rows / block {
            let span = b * block * d..(b + 1) * block * d;
            matmul_into(&m, &xv[span.clone()], &mut out[span], block, block, d);
        }
        for (r, row) in out.chunks_mut(d).enumerate() {
            let count = (r % block + 1) as f64;
            row.iter_mut().for_each(|v| *v /= count);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::CumulativeMean(x, block), &[x]))
    }

    /// Builds `h[i][j] = f[i] + z[j]` for `j <= i` and the zero vector
    /// otherwise, independently for each block of `block` rows.
    ///
    /// Output has `block` rows per input row: for block `b`, row
    /// `(b·block + i)·block + j` holds `h[i][j]`.
    pub fn incremental_states(&mut self, z: Var, f: Var, block: usize) -> Result<Var> {
        if self.shape(z) != self.shape(f) {
            return Err(Error::dim("incremental_states", self.shape(z), self.shape(f)));
        }
        let rows = self.rows(z);
        if block == 0 || rows % block != 0 {
            return Err(Error::dim("incremental_states", self.shape(z), &[block]));
        }
        let d = self.cols(z);
        let (zv, fv) = (self.value(z), self.value(f));
        let mut out = vec![0.0; rows * block * d];
        for b in 0..rows / block {
            for i in 0..block {
                let fi = &fv[(b * block + i) * d..(b * block + i + 1) * d];
                for j in 0..=i {
                    let zj = &zv[(b * block + j) * d..(b * block + j + 1) * d];
                    let o = ((b * block + i) * block + j) * d;
                    for c in 0..d {
                        out[o + c] = fi[c] + zj[c];
                    }
                }
            }
        }
        Ok(self.push(
            vec![rows * block, d],
            out,
            Op::IncrementalStates { z, f, block },
            &[z, f],
        ))
    }

    // ----- attention -----

    /// Multi-head scaled dot-product attention where query row `r` attends
    /// to key rows `spans[r].start .. spans[r].start + spans[r].len`.
    ///
    /// Inputs are already projected; heads are contiguous column groups.
    /// Rows with an empty span produce zeros. Returns the concatenated
    /// heads (no output projection).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spans: &[KeySpan], heads: usize) -> Result<Var> {
        let d = self.cols(q);
        if self.cols(k) != d || self.shape(k) != self.shape(v) {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", self.shape(q), &[heads]));
        }
        let rq = self.rows(q);
        let rk = self.rows(k);
        if spans.len() != rq {
            return Err(Error::dim("attention", self.shape(q), &[spans.len()]));
        }
        if let Some(s) = spans.iter().find(|s| s.start + s.len > rk) {
            return Err(Error::Index {
                op: "attention",
                index: s.start + s.len,
                extent: rk,
            });
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let total: usize = spans.iter().map(|s| s.len).sum::<usize>() * heads;
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; rq * d];
        let mut off = 0;
        let mut counted = 0u64;
        for (r, span) in spans.iter().enumerate() {
            for h in 0..heads {
                let c0 = h * dk;
                let qrow = &qv[r * d + c0..r * d + c0 + dk];
                let p = &mut probs[off..off + span.len];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate() {
                    let krow = &kv[(span.start + j) * d + c0..(span.start + j) * d + c0 + dk];
                    let mut dot = 0.0;
                    for (a, b) in qrow.iter().zip(krow) {
                        dot += a * b;
                    }
                    *pj = dot * scale;
                    max = max.max(*pj);
                }
                let mut sum = 0.0;
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    sum += *pj;
                }
                for pj in p.iter_mut() {
                    *pj /= sum;
                }
                let orow = &mut out[r * d + c0..r * d + c0 + dk];
                for (j, &pj) in p.iter().enumerate() {
                    let vrow = &vv[(span.start + j) * d + c0..(span.start + j) * d + c0 + dk];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += pj * x;
                    }
                }
                counted += 2 * (span.len * dk) as u64;
                off += span.len;
            }
        }
        macs::add(counted);
        Ok(self.push(
            vec![rq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                spans: spans.into(),
                heads,
                scale,
                probs: probs.into(),
            },
            &[q, k, v],
        ))
    }

    // ----- losses -----

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over rows where `keep` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], keep: &[bool]) -> Result<Var> {
        let v = self.cols(logits);
        let rows = self.rows(logits);
        if targets.len() != rows || keep.len() != rows {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some((&bad, _)) = targets.iter().zip(keep).find(|(&t, &k)| k && t >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                extent: v,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; rows * v];
        let mut loss = 0.0;
        let mut count = 0;
        for r in 0..rows {
            if !keep[r] {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= sum;
            }
            loss += max + sum.ln() - row[targets[r]];
            count += 1;
        }
        let loss = if count > 0 { loss / count as f64 } else { 0.0 };
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                keep: keep.into(),
                probs: probs.into(),
                count,
            },
            &[logits],
        ))
    }

    /// `(1/n) Σ_i ‖a_i − b_i‖²` over the `n` rows where `keep` is true.
    pub fn l2_distance(&mut self, a: Var, b: Var, keep: &[bool]) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("l2_distance", self.shape(a), self.shape(b)));
        }
        let rows = self.rows(a);
        if keep.len() != rows {
            return Err(Error::dim("l2_distance", self.shape(a), &[keep.len()]));
        }
        let d = self.cols(a);
        let (av, bv) = (self.value(a), self.value(b));
        let mut total = 0.0;
        let mut count = 0;
        for r in (0..rows).filter(|&r| keep[r]) {
            total += av[r * d..(r + 1) * d]
                .iter()
                .zip(&bv[r * d..(r + 1) * d])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::L2Distance {
                a,
                b,
                keep: keep.into(),
                count,
            },
            &[a, b],
        ))
    }

    // ----- backward -----

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Accumulates `∂loss/∂node` into the gradient of every node that
    /// requires it and returns how many recorded operations were replayed.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.recording {
            return Err(Error::Contract("backward on a graph that is not recording".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !node.op.is_leaf() {
                visited += 1;
                self.propagate(i, &g, &mut adj);
            }
            let node = &mut self.nodes[i];
            if node.grad.is_empty() {
                node.grad = g;
            } else {
                for (a, b) in node.grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        Ok(visited)
    }

    /// Copies a parameter's gradient into the tensor it was created from.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        let g = self.grad(v);
        if !g.is_empty() {
            t.accumulate_grad(g);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].values.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_to(s, g));
                acc(*b, &mut |s| add_to(s, g));
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |s| add_to(s, g));
                let d = self.nodes[b.0].values.len();
                acc(*b, &mut |s| {
                    for row in g.chunks(d) {
                        add_to(s, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                acc(*a, &mut |s| {
                    for ((x, gi), y) in s.iter_mut().zip(g).zip(bv) {
                        *x += gi * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, gi), y) in s.iter_mut().zip(g).zip(av) {
                        *x += gi * y;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| {
                for (x, gi) in s.iter_mut().zip(g) {
                    *x += gi * k;
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, p, q) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                acc(*a, &mut |s| matmul_bt_acc(g, bv, s, m, p, q));
                acc(*b, &mut |s| matmul_at_acc(av, g, s, m, p, q));
            }
            Op::Transpose(a) => {
                let s0 = &self.nodes[a.0].shape;
                let (m, n) = (s0[0], s0[1]);
                acc(*a, &mut |s| {
                    for r in 0..m {
                        for c in 0..n {
                            s[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].values;
                acc(*a, &mut |s| {
                    for ((x, gi), v) in s.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::GatherRows(t, idx) => {
                let d = *self.nodes[t.0].shape.last().unwrap();
                acc(*t, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_to(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let d = *self.nodes[a.0].shape.last().unwrap();
                let len = node.shape[1];
                acc(*a, &mut |s| {
                    for (r, row) in g.chunks(len).enumerate() {
                        add_to(&mut s[r * d + start..r * d + start + len], row);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts.iter() {
                    let c = *self.nodes[p.0].shape.last().unwrap();
                    acc(p, &mut |s| {
                        for (r, row) in s.chunks_mut(c).enumerate() {
                            add_to(row, &g[r * total + off..r * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let d = node.shape[1];
                acc(*a, &mut |s| add_to(&mut s[start * d..start * d + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts.iter() {
                    let len = self.nodes[p.0].values.len();
                    acc(p, &mut |s| add_to(s, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::LayerNorm { x, gain, bias, stats } => {
                let d = node.shape[node.shape.len() - 1];
                let xv = &self.nodes[x.0].values;
                let gv = &self.nodes[gain.0].values;
                acc(*x, &mut |s| {
                    for (r, &(mean, inv)) in stats.iter().enumerate() {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for c in 0..d {
                            let dy = gr[c] * gv[c];
                            let xhat = (xr[c] - mean) * inv;
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                        for c in 0..d {
                            let dy = gr[c] * gv[c];
                            let xhat = (xr[c] - mean) * inv;
                            s[r * d + c] += inv * (dy - sum_dy / d as f64 - xhat * sum_dy_xhat / d as f64);
                        }
                    }
                });
                acc(*gain, &mut |s| {
                    for (r, &(mean, inv)) in stats.iter().enumerate() {
                        for c in 0..d {
                            s[c] += g[r * d + c] * (xv[r * d + c] - mean) * inv;
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for row in g.chunks(d) {
                        add_to(s, row);
                    }
                });
            }
            Op::MaskedSoftmax(a) => {
                let n = node.shape[node.shape.len() - 1];
                let y = &node.values;
                acc(*a, &mut |s| {
                    for ((sr, yr), gr) in s.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            sr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::CumulativeMean(a, block) => {
                let d = node.shape[node.shape.len() - 1];
                let block = *block;
                acc(*a, &mut |s| {
                    for (b, gb) in g.chunks(block * d).enumerate() {
                        let sb = &mut s[b * block * d..(b + 1) * block * d];
                        for i in 0..block {
                            let count = (i + 1) as f64;
                            for j in 0..=i {
                                for c in 0..d {
                                    sb[j * d + c] += gb[i * d + c] / count;
                                }
                            }
                        }
                    }
                });
            }
            Op::IncrementalStates { z, f, block } => {
                let d = node.shape[1];
                let block = *block;
                let rows = self.nodes[z.0].values.len() / d;
                acc(*z, &mut |s| {
                    for b in 0..rows / block {
                        for i in 0..block {
                            for j in 0..=i {
                                let o = ((b * block + i) * block + j) * d;
                                add_to(&mut s[(b * block + j) * d..(b * block + j + 1) * d], &g[o..o + d]);
                            }
                        }
                    }
                });
                acc(*f, &mut |s| {
                    for b in 0..rows / block {
                        for i in 0..block {
                            for j in 0..=i {
                                let o = ((b * block + i) * block + j) * d;
                                add_to(&mut s[(b * block + i) * d..(b * block + i + 1) * d], &g[o..o + d]);
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                scale,
                probs,
            } => {
                let d = node.shape[1];
                let dk = d / heads;
                let (qv, kv, vv) = (
                    &self.nodes[q.0].values,
                    &self.nodes[k.0].values,
                    &self.nodes[v.0].values,
                );
                let mut dq = vec![0.0; qv.len()];
                let mut dkv = vec![0.0; kv.len()];
                let mut dvv = vec![0.0; vv.len()];
                let mut off = 0;
                let mut ds = Vec::new();
                for (r, span) in spans.iter().enumerate() {
                    for h in 0..*heads {
                        let c0 = h * dk;
                        let p = &probs[off..off + span.len];
                        let gr = &g[r * d + c0..r * d + c0 + dk];
                        ds.clear();
                        let mut weighted = 0.0;
                        for (j, &pj) in p.iter().enumerate() {
                            let row = (span.start + j) * d + c0;
                            let vrow = &vv[row..row + dk];
                            let da: f64 = gr.iter().zip(vrow).map(|(a, b)| a * b).sum();
                            for (dv, gi) in dvv[row..row + dk].iter_mut().zip(gr) {
                                *dv += pj * gi;
                            }
                            ds.push(da);
                            weighted += pj * da;
                        }
                        let qrow = &qv[r * d + c0..r * d + c0 + dk];
                        for (j, &pj) in p.iter().enumerate() {
                            let dsj = pj * (ds[j] - weighted) * scale;
                            let row = (span.start + j) * d + c0;
                            for c in 0..dk {
                                dq[r * d + c0 + c] += dsj * kv[row + c];
                                dkv[row + c] += dsj * qrow[c];
                            }
                        }
                        off += span.len;
                    }
                }
                acc(*q, &mut |s| add_to(s, &dq));
                acc(*k, &mut |s| add_to(s, &dkv));
                acc(*v, &mut |s| add_to(s, &dvv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                keep,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vsz = *self.nodes[logits.0].shape.last().unwrap();
                let w = g[0] / *count as f64;
                acc(*logits, &mut |s| {
                    for (r, (&t, &k)) in targets.iter().zip(keep.iter()).enumerate() {
                        if !k {
                            continue;
                        }
                        for c in 0..vsz {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            s[r * vsz + c] += w * (probs[r * vsz + c] - onehot);
                        }
                    }
                });
            }
            Op::L2Distance { a, b, keep, count } => {
                if *count == 0 {
                    return;
                }
                let d = *self.nodes[a.0].shape.last().unwrap();
                let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                let w = 2.0 * g[0] / *count as f64;
                acc(*a, &mut |s| {
                    for r in (0..keep.len()).filter(|&r| keep[r]) {
                        for c in r * d..(r + 1) * d {
                            s[c] += w * (av[c] - bv[c]);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for r in (0..keep.len()).filter(|&r| keep[r]) {
                        for c in r * d..(r + 1) * d {
                            s[c] -= w * (av[c] - bv[c]);
                        }
                    }
                });
            }
        }
    }
}

fn add_to(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Softmax of one row with masked entries pushed to [`MASK_FILL`].
fn softmax_row_masked(row: &[f64], keep: &[bool], out: &mut [f64]) {
    if !keep.iter().any(|&k| k) {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut max = f64::NEG_INFINITY;
    for (o, (&s, &k)) in out.iter_mut().zip(row.iter().zip(keep)) {
        *o = if k { s } else { s + MASK_FILL };
        max = max.max(*o);
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    for (o, &k) in out.iter_mut().zip(keep) {
        *o = if k { *o / sum } else { 0.0 };
    }
}

/// Row-major `n×n` matrix with ones on and below the diagonal.
pub fn lower_triangular_ones(n: usize) -> Vec<f64> {
    (0..n * n).map(|ij| if ij % n <= ij / n { 1.0 } else { 0.0 }).collect()
}
