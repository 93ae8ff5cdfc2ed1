//! Dense row-major `f64` tensors and the multiply-accumulate counter.

use std::cell::Cell;

use rand::Rng;

use crate::error::{Error, Result};

/// A dense row-major array with a gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::dim("tensor", shape, &[values.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            grad: vec![0.0; values.len()],
            values,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zero tensor shape")
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(&[1], vec![v]).expect("scalar shape")
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::new(shape, values).expect("uniform tensor shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Number of rows when viewed as a matrix whose columns are the last axis.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.grad.len());
        for (g, d) in self.grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Forward-pass multiply-accumulate tally for the current thread.
///
/// Only matrix products (plain matmul and the attention kernel's score and
/// weighted-sum products) are counted.
pub mod macs {
    use super::MACS;

    pub fn reset() {
        MACS.with(|c| c.set(0));
    }

    pub fn read() -> u64 {
        MACS.with(|c| c.get())
    }

    pub(crate) fn add(n: u64) {
        MACS.with(|c| c.set(c.get() + n));
    }

    /// Runs `f` and returns its result with the MACs it performed.
    pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
        let before = read();
        let out = f();
        (out, read() - before)
    }
}

/// `out[m×q] = a[m×p] · b[p×q]`, accumulating over `p` in order.
///
/// Every output element is summed in the same order regardless of `m`, so a
/// row computed alone is bitwise equal to the same row inside a larger batch.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    macs::add((m * p * q) as u64);
    out[..m * q].iter_mut().for_each(|o| *o = 0.0);
    // Four output rows share each pass over `b`; every element still sums
    // over `l` in increasing order.
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * q..(i + 4) * q].split_at_mut(q);
        let (o1, rest) = rest.split_at_mut(q);
        let (o2, o3) = rest.split_at_mut(q);
        for l in 0..p {
            let (a0, a1, a2, a3) = (a[i * p + l], a[(i + 1) * p + l], a[(i + 2) * p + l], a[(i + 3) * p + l]);
            let b_row = &b[l * q..(l + 1) * q];
            for j in 0..q {
                let bv = b_row[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let out_row = &mut out[i * q..(i + 1) * q];
        let a_row = &a[i * p..(i + 1) * p];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * q..(l + 1) * q];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×p] += g[m×q] · b[p×q]ᵀ` (backward helper, not counted).
pub(crate) fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    let mut bt = vec![0.0; p * q];
    for l in 0..p {
        for j in 0..q {
            bt[j * p + l] = b[l * q + j];
        }
    }
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        for (j, &gv) in g[i * q..(i + 1) * q].iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(&bt[j * p..(j + 1) * p]) {
                *o += gv * bv;
            }
        }
    }
}

/// `out[p×q] += a[m×p]ᵀ · g[m×q]` (backward helper, not counted).
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let g0 = &g[i * q..(i + 1) * q];
        let g1 = &g[(i + 1) * q..(i + 2) * q];
        let g2 = &g[(i + 2) * q..(i + 3) * q];
        let g3 = &g[(i + 3) * q..(i + 4) * q];
        for l in 0..p {
            let (a0, a1, a2, a3) = (a[i * p + l], a[(i + 1) * p + l], a[(i + 2) * p + l], a[(i + 3) * p + l]);
            let out_row = &mut out[l * q..(l + 1) * q];
            for j in 0..q {
                out_row[j] += a0 * g0[j] + a1 * g1[j] + a2 * g2[j] + a3 * g3[j];
            }
        }
        i += 4;
    }
    for i in i..m {
        let a_row = &a[i * p..(i + 1) * p];
        let g_row = &g[i * q..(i + 1) * q];
        for (l, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[l * q..(l + 1) * q];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}
