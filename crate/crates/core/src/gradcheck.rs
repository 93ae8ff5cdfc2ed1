//! Central finite-difference checks of the tape's backward pass.
//!
//! Non-scalar outputs are reduced to a scalar through a fixed random
//! projection `Σ out ⊙ R`, so every output element contributes to the
//! gradient being checked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PaddedBatch};
use crate::tape::{Graph, KeySpan, Var};
use crate::tensor::Tensor;
use crate::training::{TrainConfig, Trainer};

/// Below this absolute gap a derivative mismatch is treated as round-off.
/// Masked entries have an analytic gradient of exactly zero while the
/// numerical one is a few ulps of the loss divided by the step.
pub const ABS_FLOOR: f64 = 1e-8;

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One primitive at one input shape.
pub struct GradCase {
    pub op: &'static str,
    pub shape: String,
    pub inputs: Vec<Tensor>,
    build: Builder,
}

impl GradCase {
    pub fn new(
        op: &'static str,
        shape: impl Into<String>,
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            op,
            shape: shape.into(),
            inputs,
            build: Box::new(build),
        }
    }
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub shape: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// `true` when analytic `a` and numerical `n` agree to `rtol`.
pub fn agrees(a: f64, n: f64, rtol: f64) -> bool {
    let gap = (a - n).abs();
    gap <= ABS_FLOOR || gap <= rtol * a.abs().max(n.abs())
}

fn relative_error(a: f64, n: f64) -> f64 {
    let gap = (a - n).abs();
    if gap <= ABS_FLOOR {
        0.0
    } else {
        gap / a.abs().max(n.abs())
    }
}

fn scalarize(g: &mut Graph, out: Var) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64 ^ 0xfd);
    let r = g.constant(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

fn evaluate(case: &GradCase, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let s = scalarize(&mut g, out)?;
    Ok(g.value(s)[0])
}

/// Compares backward against central differences for every input element.
pub fn check_case(case: &GradCase, step: f64, rtol: f64) -> Result<GradReport> {
    let mut g = Graph::new();
    let inputs: Vec<Tensor> = case.inputs.iter().map(|t| t.clone().with_grad()).collect();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = scalarize(&mut g, out)?;
    g.backward(loss)?;
    let mut report = GradReport {
        op: case.op.to_string(),
        shape: case.shape.clone(),
        checked: 0,
        max_rel_err: 0.0,
        failures: 0,
    };
    for (i, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = {
            let gr = g.grad(v);
            if gr.is_empty() {
                vec![0.0; inputs[i].numel()]
            } else {
                gr.to_vec()
            }
        };
        for e in 0..inputs[i].numel() {
            let mut probe = inputs.clone();
            probe[i].values_mut()[e] += step;
            let up = evaluate(case, &probe)?;
            probe[i].values_mut()[e] -= 2.0 * step;
            let down = evaluate(case, &probe)?;
            let numeric = (up - down) / (2.0 * step);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(relative_error(analytic[e], numeric));
            if !agrees(analytic[e], numeric, rtol) {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Values bounded away from zero so the ReLU kink is never straddled.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).expect("shape")
}

/// Every differentiable primitive at three shapes each.
pub fn primitive_suite() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = Vec::new();
    let shapes: [(usize, usize); 3] = [(1, 3), (2, 4), (5, 3)];
    for &(r, c) in &shapes {
        let sh = format!("{r}x{c}");
        let (a, b) = (rand_tensor(&mut rng, &[r, c]), rand_tensor(&mut rng, &[r, c]));
        cases.push(GradCase::new("add", &sh, vec![a.clone(), b.clone()], |g, v| {
            g.add(v[0], v[1])
        }));
        cases.push(GradCase::new("mul", &sh, vec![a.clone(), b.clone()], |g, v| {
            g.mul(v[0], v[1])
        }));
        cases.push(GradCase::new("scale", &sh, vec![a.clone()], |g, v| {
            Ok(g.scale(v[0], -1.7))
        }));
        cases.push(GradCase::new("sum", &sh, vec![a.clone()], |g, v| Ok(g.sum(v[0]))));
        cases.push(GradCase::new("relu", &sh, vec![off_kink(&mut rng, &[r, c])], |g, v| {
            Ok(g.relu(v[0]))
        }));
        cases.push(GradCase::new("transpose", &sh, vec![a.clone()], |g, v| {
            g.transpose(v[0])
        }));
        let row = rand_tensor(&mut rng, &[c]);
        cases.push(GradCase::new("add_row", &sh, vec![a.clone(), row.clone()], |g, v| {
            g.add_row(v[0], v[1])
        }));
        let w = rand_tensor(&mut rng, &[c, r + 1]);
        cases.push(GradCase::new(
            "matmul",
            format!("{sh}·{c}x{}", r + 1),
            vec![a.clone(), w.clone()],
            |g, v| g.matmul(v[0], v[1]),
        ));
        let bias = rand_tensor(&mut rng, &[r + 1]);
        cases.push(GradCase::new("linear", &sh, vec![a.clone(), w, bias], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }));
        let idx: Vec<usize> = (0..r + 2).map(|i| (i * 7) % r).collect();
        cases.push(GradCase::new("gather_rows", &sh, vec![a.clone()], move |g, v| {
            g.gather_rows(v[0], &idx)
        }));
        let (s0, sl) = (c / 2, c - c / 2);
        cases.push(GradCase::new("slice_cols", &sh, vec![a.clone()], move |g, v| {
            g.slice_cols(v[0], s0, sl)
        }));
        cases.push(GradCase::new("concat_cols", &sh, vec![a.clone(), b.clone()], |g, v| {
            g.concat_cols(&[v[0], v[1]])
        }));
        let (r0, rl) = (r / 2, r - r / 2);
        cases.push(GradCase::new("slice_rows", &sh, vec![a.clone()], move |g, v| {
            g.slice_rows(v[0], r0, rl)
        }));
        cases.push(GradCase::new("concat_rows", &sh, vec![a.clone(), b.clone()], |g, v| {
            g.concat_rows(&[v[0], v[1]])
        }));
        let (gain, beta) = (rand_tensor(&mut rng, &[c]), rand_tensor(&mut rng, &[c]));
        cases.push(GradCase::new("layer_norm", &sh, vec![a.clone(), gain, beta], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }));
        let keep: Vec<bool> = (0..c).map(|j| j == 0 || j % 3 != 1).collect();
        cases.push(GradCase::new("masked_softmax", &sh, vec![a.clone()], move |g, v| {
            g.masked_softmax(v[0], &keep)
        }));
        let targets: Vec<usize> = (0..r).map(|i| (i * 5 + 1) % c).collect();
        let tkeep: Vec<bool> = (0..r).map(|i| r == 1 || i != 1).collect();
        cases.push(GradCase::new("cross_entropy", &sh, vec![a.clone()], move |g, v| {
            g.cross_entropy(v[0], &targets, &tkeep)
        }));
        let lkeep: Vec<bool> = (0..r).map(|i| r == 1 || i % 2 == 0).collect();
        cases.push(GradCase::new("l2_distance", &sh, vec![a, b], move |g, v| {
            g.l2_distance(v[0], v[1], &lkeep)
        }));
    }
    // Block-structured sequence primitives: (blocks, block length, width).
    for &(blocks, n, d) in &[(1usize, 1usize, 2usize), (1, 3, 4), (2, 4, 3)] {
        let sh = format!("{blocks}x{n}x{d}");
        let x = rand_tensor(&mut rng, &[blocks * n, d]);
        let f = rand_tensor(&mut rng, &[blocks * n, d]);
        cases.push(GradCase::new(
            "masked_cumulative_mean",
            &sh,
            vec![x.clone()],
            move |g, v| g.masked_cumulative_mean(v[0], n),
        ));
        cases.push(GradCase::new("incremental_states", &sh, vec![x, f], move |g, v| {
            g.incremental_states(v[0], v[1], n)
        }));
    }
    for &(rq, rk, d, heads) in &[(1usize, 1usize, 2usize, 1usize), (3, 4, 4, 2), (5, 5, 6, 3)] {
        let sh = format!("q{rq}xk{rk}xd{d}h{heads}");
        let q = rand_tensor(&mut rng, &[rq, d]);
        let k = rand_tensor(&mut rng, &[rk, d]);
        let v = rand_tensor(&mut rng, &[rk, d]);
        // Staggered windows: row r sees keys from min(r mod 2, rk−1) to the end.
        let spans: Vec<KeySpan> = (0..rq)
            .map(|r| {
                let start = (r % 2).min(rk - 1);
                KeySpan::new(start, rk - start)
            })
            .collect();
        cases.push(GradCase::new("attention", sh, vec![q, k, v], move |g, x| {
            g.attention(x[0], x[1], x[2], &spans, heads)
        }));
    }
    cases
}

/// Checks the full joint objective (student CE + teacher CE + λ·L2) of a
/// small student/teacher pair against central differences, probing
/// `per_tensor` random coordinates of every parameter tensor of both
/// models.
pub fn check_composite_loss(
    model: &ModelConfig,
    pairs: &[(Vec<usize>, Vec<usize>)],
    k: usize,
    per_tensor: usize,
    seed: u64,
    step: f64,
    rtol: f64,
) -> Result<GradReport> {
    let cfg = TrainConfig {
        k,
        seed,
        lambda: 0.1,
        ..Default::default()
    };
    let trainer = Trainer::new(model.clone(), cfg)?;
    let batch = PaddedBatch::new(pairs)?;
    let (_, grads) = trainer.objective(&batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0);
    let mut report = GradReport {
        op: "composite_loss".into(),
        shape: format!("d{} N{} batch{}", model.d_model, model.n_layers, pairs.len()),
        checked: 0,
        max_rel_err: 0.0,
        failures: 0,
    };
    for (which, grads) in grads.iter().enumerate() {
        for (ti, analytic) in grads.iter().enumerate() {
            for _ in 0..per_tensor {
                let e = rng.gen_range(0..analytic.len());
                let mut probe = trainer.clone();
                let nudge = |t: &mut Trainer, delta: f64| {
                    let store = if which == 0 {
                        &mut t.student.params
                    } else {
                        &mut t.teacher.params
                    };
                    store.tensors_mut()[ti].values_mut()[e] += delta;
                };
                nudge(&mut probe, step);
                let up = probe.objective_value(&batch)?;
                nudge(&mut probe, -2.0 * step);
                let down = probe.objective_value(&batch)?;
                let numeric = (up - down) / (2.0 * step);
                report.checked += 1;
                report.max_rel_err = report.max_rel_err.max(relative_error(analytic[e], numeric));
                if !agrees(analytic[e], numeric, rtol) {
                    report.failures += 1;
                }
            }
        }
    }
    if report.checked == 0 {
        return Err(Error::Contract("no parameters were probed".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agreement_rule() {
        assert!(agrees(1.0, 1.00005, 1e-4));
        assert!(!agrees(1.0, 1.001, 1e-4));
        assert!(agrees(0.0, 1e-10, 1e-4));
    }

    #[test]
    fn suite_covers_each_primitive_three_times() {
        let suite = primitive_suite();
        let mut counts = std::collections::BTreeMap::new();
        for c in &suite {
            *counts.entry(c.op).or_insert(0) += 1;
        }
        assert!(counts.values().all(|&n| n >= 3), "{counts:?}");
    }
}
