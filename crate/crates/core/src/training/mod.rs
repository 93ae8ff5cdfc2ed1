//! Joint teacher/student training with the composite loss
//! `CE(student) + CE(teacher) + λ·L2(z_incr, z_full)`, and the alternative
//! where the teacher is trained first and then frozen.

mod data;
mod optim;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use data::{
    bucketed_batches, generate_synthetic, load_corpus, Corpus, ParallelExample, SyntheticTaskSpec, TaskKind,
};
pub use optim::Adam;

use crate::config::parse_value;
use crate::error::{Error, Result};
use crate::model::{Bound, ModelConfig, PaddedBatch, Seq2Seq, Variant};
use crate::tape::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Joint,
    PretrainFixedTeacher,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "pretrain_fixed_teacher" => Ok(TrainMode::PretrainFixedTeacher),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::PretrainFixedTeacher => "pretrain_fixed_teacher",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Student steps (joint steps in joint mode).
    pub max_steps: usize,
    /// Teacher-only steps before the student phase in pretrain mode.
    pub teacher_steps: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub k: usize,
    /// In joint mode, let the distillation term also pull the teacher's
    /// encoder toward the student's. When off, the teacher states enter the
    /// distance as constants.
    pub distill_into_teacher: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            batch_size: 32,
            max_steps: 2000,
            teacher_steps: 2000,
            seed: 0,
            mode: TrainMode::Joint,
            k: 3,
            distill_into_teacher: true,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lambda" => self.lambda = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "eps" => self.eps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_steps" => self.max_steps = parse_value(key, value)?,
            "teacher_steps" => self.teacher_steps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "mode" => self.mode = TrainMode::parse(value)?,
            "k" => self.k = parse_value(key, value)?,
            "distill_into_teacher" => self.distill_into_teacher = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Builds a config from pairs, rejecting unknown keys.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in pairs {
            if !c.set(k, v)? {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.k == 0 || self.batch_size == 0 {
            return Err(Error::Config("k and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Handles to the loss terms on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub student: Var,
    pub teacher: Option<Var>,
    pub distill: Var,
}

/// `CE(student) + CE(teacher) + λ·L2(z_incr, z_full)`. Pass `teacher_logits =
/// None` to drop the teacher term. `tgt_keep`/`src_keep` mark real tokens.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    student_logits: Var,
    teacher_logits: Option<Var>,
    targets: &[usize],
    tgt_keep: &[bool],
    z_incr: Var,
    z_full: Var,
    src_keep: &[bool],
    lambda: f64,
) -> Result<LossTerms> {
    let student = g.cross_entropy(student_logits, targets, tgt_keep)?;
    let teacher = teacher_logits
        .map(|t| g.cross_entropy(t, targets, tgt_keep))
        .transpose()?;
    let distill = g.l2_distance(z_incr, z_full, src_keep)?;
    let mut total = student;
    if let Some(t) = teacher {
        total = g.add(total, t)?;
    }
    if lambda != 0.0 {
        let d = g.scale(distill, lambda);
        total = g.add(total, d)?;
    }
    Ok(LossTerms {
        total,
        student,
        teacher,
        distill,
    })
}

/// One logged optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_student: f64,
    pub loss_teacher: f64,
    pub loss_distill: f64,
    pub grad_norm: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss_student,loss_teacher,loss_distill,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.loss_student, self.loss_teacher, self.loss_distill, self.grad_norm
        )
    }
}

pub fn write_metrics_csv<W: Write>(out: &mut W, rows: &[StepMetrics]) -> std::io::Result<()> {
    writeln!(out, "{}", StepMetrics::CSV_HEADER)?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

fn finite(component: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            component: component.to_string(),
        })
    }
}

fn grad_sq(store: &crate::model::ParamStore) -> f64 {
    store.iter().flat_map(|(_, t)| t.grad().iter()).map(|g| g * g).sum()
}

struct Recorded {
    student: Bound,
    teacher: Bound,
    terms: LossTerms,
    teacher_logits: Var,
}

/// An incremental student, an offline teacher and their optimisers.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub student: Seq2Seq,
    pub teacher: Seq2Seq,
    pub config: TrainConfig,
    student_opt: Adam,
    teacher_opt: Adam,
    step: usize,
}

impl Trainer {
    /// Fresh models: the student is seeded with `config.seed`, the teacher
    /// with `config.seed + 1`.
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let student = Seq2Seq::new(model.clone(), Variant::Incremental, config.seed)?;
        let teacher = Seq2Seq::new(model, Variant::Offline, config.seed.wrapping_add(1))?;
        Self::from_models(student, teacher, config)
    }

    pub fn from_models(student: Seq2Seq, teacher: Seq2Seq, config: TrainConfig) -> Result<Self> {
        if student.variant != Variant::Incremental || teacher.variant != Variant::Offline {
            return Err(Error::Config(format!(
                "expected an incremental student and an offline teacher, got {} and {}",
                student.variant.name(),
                teacher.variant.name()
            )));
        }
        if student.config.src_vocab != teacher.config.src_vocab || student.config.d_model != teacher.config.d_model {
            return Err(Error::Config(
                "student and teacher must share source vocabulary and width".into(),
            ));
        }
        let adam = |m: &Seq2Seq| Adam::new(&m.params, config.lr, config.beta1, config.beta2, config.eps);
        Ok(Self {
            student_opt: adam(&student),
            teacher_opt: adam(&teacher),
            student,
            teacher,
            config,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Records both forward passes and the loss on a fresh graph.
    fn build_loss(&self, g: &mut Graph, batch: &PaddedBatch, freeze_teacher: bool) -> Result<Recorded> {
        let cfg = &self.config;
        let ps = self.student.bind(g, true);
        let pt = self.teacher.bind(g, !freeze_teacher);
        let s = self.student.forward_batch(g, &ps, batch, cfg.k)?;
        let t = self.teacher.forward_batch(g, &pt, batch, cfg.k)?;
        let z_full = if freeze_teacher || !cfg.distill_into_teacher {
            let shape = g.shape(t.encoder).to_vec();
            let values = g.value(t.encoder).to_vec();
            g.constant(&shape, values)?
        } else {
            t.encoder
        };
        let terms = total_loss(
            g,
            s.logits,
            (!freeze_teacher).then_some(t.logits),
            &batch.labels,
            &batch.tgt_keep(),
            s.encoder,
            z_full,
            &batch.src_keep(),
            cfg.lambda,
        )?;
        Ok(Recorded {
            student: ps,
            teacher: pt,
            terms,
            teacher_logits: t.logits,
        })
    }

    /// Value of the joint objective on `batch` and its gradient with respect
    /// to every parameter tensor, `[student, teacher]`, in store order.
    /// Parameters are left untouched.
    pub fn objective(&self, batch: &PaddedBatch) -> Result<(f64, [Vec<Vec<f64>>; 2])> {
        let mut g = Graph::new();
        let r = self.build_loss(&mut g, batch, false)?;
        let value = g.value(r.terms.total)[0];
        g.backward(r.terms.total)?;
        let mut student = self.student.params.clone();
        let mut teacher = self.teacher.params.clone();
        student.zero_grad();
        teacher.zero_grad();
        r.student.accumulate(&g, &mut student);
        r.teacher.accumulate(&g, &mut teacher);
        let grads = |s: &crate::model::ParamStore| s.iter().map(|(_, t)| t.grad().to_vec()).collect();
        Ok((value, [grads(&student), grads(&teacher)]))
    }

    /// The joint objective without recording a graph.
    pub fn objective_value(&self, batch: &PaddedBatch) -> Result<f64> {
        let mut g = Graph::inference();
        let r = self.build_loss(&mut g, batch, false)?;
        Ok(g.value(r.terms.total)[0])
    }

    /// Joint step (or frozen-teacher student step when `freeze_teacher`).
    pub fn train_step(&mut self, batch: &PaddedBatch, freeze_teacher: bool) -> Result<StepMetrics> {
        let mut g = Graph::new();
        let Recorded {
            student: ps,
            teacher: pt,
            terms,
            teacher_logits,
        } = self.build_loss(&mut g, batch, freeze_teacher)?;
        let tgt_keep = batch.tgt_keep();
        let loss_student = finite("loss_student", g.value(terms.student)[0])?;
        let loss_teacher = match terms.teacher {
            Some(v) => finite("loss_teacher", g.value(v)[0])?,
            None => {
                let ce = g.cross_entropy(teacher_logits, &batch.labels, &tgt_keep)?;
                finite("loss_teacher", g.value(ce)[0])?
            }
        };
        let loss_distill = finite("loss_distill", g.value(terms.distill)[0])?;
        g.backward(terms.total)?;

        self.student.params.zero_grad();
        ps.accumulate(&g, &mut self.student.params);
        let mut sq = grad_sq(&self.student.params);
        if !freeze_teacher {
            self.teacher.params.zero_grad();
            pt.accumulate(&g, &mut self.teacher.params);
            sq += grad_sq(&self.teacher.params);
        }
        let grad_norm = finite("grad_norm", sq.sqrt())?;
        self.student_opt.step(&mut self.student.params);
        if !freeze_teacher {
            self.teacher_opt.step(&mut self.teacher.params);
        }
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss_student,
            loss_teacher,
            loss_distill,
            grad_norm,
        })
    }

    /// Teacher-only cross-entropy step.
    pub fn teacher_step(&mut self, batch: &PaddedBatch) -> Result<StepMetrics> {
        let mut g = Graph::new();
        let pt = self.teacher.bind(&mut g, true);
        let t = self.teacher.forward_batch(&mut g, &pt, batch, self.config.k)?;
        let ce = g.cross_entropy(t.logits, &batch.labels, &batch.tgt_keep())?;
        let loss_teacher = finite("loss_teacher", g.value(ce)[0])?;
        g.backward(ce)?;
        self.teacher.params.zero_grad();
        pt.accumulate(&g, &mut self.teacher.params);
        let grad_norm = finite("grad_norm", grad_sq(&self.teacher.params).sqrt())?;
        self.teacher_opt.step(&mut self.teacher.params);
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss_student: 0.0,
            loss_teacher,
            loss_distill: 0.0,
            grad_norm,
        })
    }

    /// Runs the configured schedule over `data`, calling `on_step` after
    /// each update. Joint mode takes `max_steps` joint steps; pretrain mode
    /// takes `teacher_steps` teacher steps then `max_steps` student steps
    /// against the frozen teacher.
    pub fn fit(&mut self, data: &[ParallelExample], mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_da7a);
        let batch_size = self.config.batch_size;
        let mut queue: Vec<Vec<usize>> = Vec::new();
        let mut next_batch = |rng: &mut ChaCha8Rng| -> Result<PaddedBatch> {
            if queue.is_empty() {
                queue = bucketed_batches(data, batch_size, rng);
                queue.reverse();
            }
            let idx = queue.pop().expect("non-empty queue");
            let pairs: Vec<(&[usize], &[usize])> = idx
                .iter()
                .map(|&i| (data[i].src.as_slice(), data[i].tgt.as_slice()))
                .collect();
            PaddedBatch::new(&pairs)
        };
        let mut log = Vec::new();
        let (teacher_steps, freeze) = match self.config.mode {
            TrainMode::Joint => (0, false),
            TrainMode::PretrainFixedTeacher => (self.config.teacher_steps, true),
        };
        for _ in 0..teacher_steps {
            let batch = next_batch(&mut rng)?;
            let m = self.teacher_step(&batch)?;
            on_step(&m);
            log.push(m);
        }
        for _ in 0..self.config.max_steps {
            let batch = next_batch(&mut rng)?;
            let m = self.train_step(&batch, freeze)?;
            on_step(&m);
            log.push(m);
        }
        Ok(log)
    }
}
