//! Staged training: per-example loss assembly on a tape, trainable masks,
//! gradient accumulation, AdamW updates and the metric stream.
//!
//! Each example gets its own tape. Per-example gradients are summed in
//! example order, so a run is bit-reproducible and the split of an
//! effective batch into micro-batches only changes the rounding of the
//! final division.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_value, KlVariant};
use crate::metrics::{MetricLine, MetricSink, Series};
use crate::model::{body_forward, head_forward, prefix_features, ModelConfig, ModelParams, ModelWeights};
use crate::nn::{Binder, Params};
use crate::optim::{linear_lr, AdamW, AdamWConfig};
use crate::recalibrator::{RecalParams, Recalibrator, RecalibratorWeights};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::PairedExample;

pub const TEACHER: &str = "teacher/";
pub const STUDENT: &str = "student/";
pub const RECALIBRATOR: &str = "recalibrator/";

/// One additive term of a stage objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossTerm {
    /// Teacher-head CE on the mixed-rule recalibrated answer rows.
    ArRecal,
    /// KL(teacher logits ‖ teacher head on mixed-rule rows).
    KlRecal,
    /// Teacher-head CE on the teacher-only recalibrated answer rows.
    RegAr,
    /// KL(teacher logits ‖ teacher head on teacher-only rows).
    RegKl,
    /// Student-head CE on student features.
    ArStudent,
    /// Teacher-head CE on teacher features (teacher pretraining).
    ArTeacher,
    /// KL between teacher and student logits at aligned answer positions.
    LogitKl(KlVariant),
    /// L1 between sorted teacher and student answer distributions.
    SortedPad,
}

impl LossTerm {
    pub fn name(&self) -> &'static str {
        match self {
            LossTerm::ArRecal => "ar_recal",
            LossTerm::KlRecal => "kl_recal",
            LossTerm::RegAr => "reg_ar",
            LossTerm::RegKl => "reg_kl",
            LossTerm::ArStudent => "ar_student",
            LossTerm::ArTeacher => "ar_teacher",
            LossTerm::LogitKl(_) => "logit_kl",
            LossTerm::SortedPad => "sorted_pad",
        }
    }

    fn needs_recalibrator(&self) -> bool {
        matches!(self, LossTerm::ArRecal | LossTerm::KlRecal | LossTerm::RegAr | LossTerm::RegKl)
    }
}

/// Which parameter groups receive updates. The teacher head and body share
/// the `teacher` switch; the student's are separate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableSet {
    pub teacher: bool,
    pub recalibrator: bool,
    pub student_body: bool,
    pub student_head: bool,
}

impl TrainableSet {
    pub fn contains(&self, name: &str) -> bool {
        if name.starts_with(TEACHER) {
            self.teacher
        } else if name.starts_with(RECALIBRATOR) {
            self.recalibrator
        } else if let Some(rest) = name.strip_prefix(STUDENT) {
            if rest == "head" {
                self.student_head
            } else {
                self.student_body
            }
        } else {
            false
        }
    }
}

impl fmt::Display for TrainableSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.teacher, "teacher"),
            (self.recalibrator, "recalibrator"),
            (self.student_body, "student-body"),
            (self.student_head, "student-head"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

/// Fully resolved description of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Label in the metric stream and checkpoint file name.
    pub name: String,
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub accumulation: usize,
    /// Examples per micro-batch.
    pub batch_size: usize,
    pub trainable: TrainableSet,
    pub losses: Vec<LossTerm>,
    /// Restricts the training pool to these tasks.
    pub tasks: Option<Vec<String>>,
    /// Curves recorded per step and on held-out evaluations.
    pub series: Vec<Series>,
    pub optimizer: AdamWConfig,
}

impl StageConfig {
    pub fn effective_batch(&self) -> usize {
        self.accumulation * self.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("{}.{f}", self.name);
        if self.accumulation == 0 || self.batch_size == 0 {
            return Err(Error::config(field("accumulation"), "accumulation and batch_size must be positive"));
        }
        if !(self.lr_start >= 0.0 && self.lr_end >= 0.0) {
            return Err(Error::config(field("lr_start"), "learning rates must be non-negative"));
        }
        if self.losses.is_empty() {
            return Err(Error::config(field("losses"), "a stage needs at least one loss term"));
        }
        if self.trainable == TrainableSet::default() {
            return Err(Error::config(field("trainable"), "a stage must train something"));
        }
        Ok(())
    }
}

/// The three parameter trees of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub teacher: ModelWeights,
    pub student: ModelWeights,
    pub recal: RecalibratorWeights,
}

impl Models {
    pub fn trees_mut(&mut self) -> [(&'static str, &mut dyn Params); 3] {
        [
            (TEACHER, &mut self.teacher.params),
            (STUDENT, &mut self.student.params),
            (RECALIBRATOR, &mut self.recal.params),
        ]
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = self.teacher.params.named(TEACHER);
        out.extend(self.student.params.named(STUDENT));
        out.extend(self.recal.params.named(RECALIBRATOR));
        out
    }

    /// Student and recalibrator tensors (the teacher has its own checkpoint).
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.add_params(STUDENT, &self.student.params);
        ck.add_params(RECALIBRATOR, &self.recal.params);
        ck
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore(STUDENT, &mut self.student.params)?;
        ck.restore(RECALIBRATOR, &mut self.recal.params)
    }
}

/// An encoded example with its rendered prefix features.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub task: String,
    pub pair: PairedExample,
    pub prefix_l: Option<Tensor>,
    pub prefix_s: Option<Tensor>,
}

impl TrainExample {
    pub fn new(task: &str, pair: PairedExample, teacher: &ModelConfig, student: &ModelConfig) -> Self {
        let prefix_l = pair.payload.as_ref().map(|p| prefix_features(teacher, p));
        let prefix_s = pair.payload.as_ref().map(|p| prefix_features(student, p));
        Self {
            task: task.into(),
            pair,
            prefix_l,
            prefix_s,
        }
    }

    fn ids_l(&self) -> Vec<usize> {
        [self.pair.q_l.as_slice(), &self.pair.a_l].concat()
    }

    fn ids_s(&self) -> Vec<usize> {
        [self.pair.q_s.as_slice(), &self.pair.a_s].concat()
    }
}

/// Frozen teacher outputs for one example.
#[derive(Clone, Debug)]
pub struct TeacherFeatures {
    pub z_q: Tensor,
    pub z_a: Tensor,
    pub logits_a: Tensor,
}

impl TeacherFeatures {
    pub fn compute(teacher: &ModelWeights, ex: &TrainExample) -> Result<Self> {
        let h = teacher.hidden(&ex.ids_l(), ex.prefix_l.as_ref())?;
        let n_q = ex.pair.q_l.len();
        let z_a = h.slice_rows(n_q, h.rows());
        Ok(Self {
            logits_a: teacher.logits(&z_a)?,
            z_q: h.slice_rows(0, n_q),
            z_a,
        })
    }
}

/// Frozen student body outputs for one example.
#[derive(Clone, Debug)]
pub struct StudentFeatures {
    pub z_q: Tensor,
    pub z_a: Tensor,
}

impl StudentFeatures {
    pub fn compute(student: &ModelWeights, ex: &TrainExample) -> Result<Self> {
        let h = student.hidden(&ex.ids_s(), ex.prefix_s.as_ref())?;
        let n_q = ex.pair.q_s.len();
        Ok(Self {
            z_q: h.slice_rows(0, n_q),
            z_a: h.slice_rows(n_q, h.rows()),
        })
    }
}

/// Parameters bound on one tape. Full trees are bound only where features
/// must be recomputed; otherwise just the heads.
pub struct Bound {
    teacher: Option<ModelParams<Var>>,
    teacher_head: Var,
    student: Option<ModelParams<Var>>,
    student_head: Var,
    recal: Option<RecalParams<Var>>,
}

impl Bound {
    pub fn new(binder: &mut Binder<'_>, models: &Models, full_teacher: bool, full_student: bool, recal: bool) -> Result<Self> {
        let teacher = full_teacher.then(|| models.teacher.bind(binder, TEACHER)).transpose()?;
        let teacher_head = match &teacher {
            Some(p) => p.head,
            None => models.teacher.bind_head(binder, TEACHER)?,
        };
        let student = full_student.then(|| models.student.bind(binder, STUDENT)).transpose()?;
        let student_head = match &student {
            Some(p) => p.head,
            None => models.student.bind_head(binder, STUDENT)?,
        };
        let recal = recal.then(|| models.recal.bind(binder, RECALIBRATOR)).transpose()?;
        Ok(Self {
            teacher,
            teacher_head,
            student,
            student_head,
            recal,
        })
    }
}

fn all_true(n: usize) -> Vec<bool> {
    vec![true; n]
}

fn check_answer(ex: &TrainExample) -> Result<()> {
    let p = &ex.pair;
    if p.gt_l.is_empty() || p.gt_s.is_empty() || p.a_l.len() != p.gt_l.len() || p.a_s.len() != p.gt_s.len() {
        return Err(Error::contract(format!(
            "example {:?} has an empty or misaligned answer mask",
            p.question
        )));
    }
    Ok(())
}

fn tag(term: &str, step: usize) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss {
            step,
            component: term.to_string(),
        },
        other => other,
    }
}

/// Tape handles of one example's loss terms and the feature values needed
/// for the untracked curves.
pub struct ExampleTerms {
    pub terms: Vec<(LossTerm, Var)>,
    z_q_s: Var,
    z_a_s: Var,
    z_q_l: Var,
    z_a_l: Var,
    t_logits: Var,
}

/// Builds every requested term for one example on `tape`.
pub fn example_terms(
    tape: &mut Tape,
    bound: &Bound,
    models: &Models,
    ex: &TrainExample,
    teacher_cache: Option<&TeacherFeatures>,
    student_cache: Option<&StudentFeatures>,
    terms: &[LossTerm],
    step: usize,
) -> Result<ExampleTerms> {
    check_answer(ex)?;
    let p = &ex.pair;
    let (n_ql, n_qs) = (p.q_l.len(), p.q_s.len());

    let (z_q_l, z_a_l, t_logits) = match (&bound.teacher, teacher_cache) {
        (Some(tp), _) => {
            let pre = ex.prefix_l.as_ref().map(|t| tape.constant(t.clone())).transpose()?;
            let ids = ex.ids_l();
            let h = body_forward(tape, &models.teacher.config, tp, &ids, pre).map_err(tag("teacher_forward", step))?;
            let zq = tape.slice_rows(h, 0, n_ql)?;
            let za = tape.slice_rows(h, n_ql, ids.len())?;
            let lg = head_forward(tape, tp, za)?;
            (zq, za, lg)
        }
        (None, Some(c)) => (
            tape.constant(c.z_q.clone())?,
            tape.constant(c.z_a.clone())?,
            tape.constant(c.logits_a.clone())?,
        ),
        (None, None) => return Err(Error::contract("teacher features neither bound nor cached")),
    };
    let (z_q_s, z_a_s) = match (&bound.student, student_cache) {
        (Some(sp), _) => {
            let pre = ex.prefix_s.as_ref().map(|t| tape.constant(t.clone())).transpose()?;
            let ids = ex.ids_s();
            let h = body_forward(tape, &models.student.config, sp, &ids, pre).map_err(tag("student_forward", step))?;
            (tape.slice_rows(h, 0, n_qs)?, tape.slice_rows(h, n_qs, ids.len())?)
        }
        (None, Some(c)) => (tape.constant(c.z_q.clone())?, tape.constant(c.z_a.clone())?),
        (None, None) => return Err(Error::contract("student features neither bound nor cached")),
    };

    let rec = bound.recal.as_ref().map(|params| Recalibrator {
        config: &models.recal.config,
        shape: &models.recal.shape,
        params,
    });
    let mut mixed_logits = None;
    let mut teacher_logits = None;
    let mut s_logits = None;
    let mut out = Vec::with_capacity(terms.len());
    for &term in terms {
        let name = term.name();
        let v = (|| -> Result<Var> {
            if term.needs_recalibrator() && rec.is_none() {
                return Err(Error::contract(format!("{name} needs the recalibrator bound")));
            }
            match term {
                LossTerm::ArRecal | LossTerm::KlRecal => {
                    let lg = match mixed_logits {
                        Some(l) => l,
                        None => {
                            let r = rec.as_ref().expect("checked").mixed(tape, z_q_s, z_a_l)?;
                            let l = tape.matmul(r.r_a, bound.teacher_head)?;
                            mixed_logits = Some(l);
                            l
                        }
                    };
                    if term == LossTerm::ArRecal {
                        tape.cross_entropy(lg, &p.gt_l, &all_true(p.gt_l.len()))
                    } else {
                        tape.kl_divergence(t_logits, lg, &all_true(p.gt_l.len()), KlVariant::Forward)
                    }
                }
                LossTerm::RegAr | LossTerm::RegKl => {
                    let lg = match teacher_logits {
                        Some(l) => l,
                        None => {
                            let r = rec.as_ref().expect("checked").teacher_only(tape, z_q_l, z_a_l)?;
                            let l = tape.matmul(r.r_a, bound.teacher_head)?;
                            teacher_logits = Some(l);
                            l
                        }
                    };
                    if term == LossTerm::RegAr {
                        tape.cross_entropy(lg, &p.gt_l, &all_true(p.gt_l.len()))
                    } else {
                        tape.kl_divergence(t_logits, lg, &all_true(p.gt_l.len()), KlVariant::Forward)
                    }
                }
                LossTerm::ArTeacher => tape.cross_entropy(t_logits, &p.gt_l, &all_true(p.gt_l.len())),
                LossTerm::ArStudent | LossTerm::LogitKl(_) | LossTerm::SortedPad => {
                    let sl = match s_logits {
                        Some(l) => l,
                        None => {
                            let l = tape.matmul(z_a_s, bound.student_head)?;
                            s_logits = Some(l);
                            l
                        }
                    };
                    match term {
                        LossTerm::ArStudent => tape.cross_entropy(sl, &p.gt_s, &all_true(p.gt_s.len())),
                        LossTerm::LogitKl(variant) => {
                            if p.gt_l.len() != p.gt_s.len() {
                                return Err(Error::TokenTypeMismatch(format!(
                                    "answer of {:?} spans {} teacher and {} student tokens",
                                    p.question,
                                    p.gt_l.len(),
                                    p.gt_s.len()
                                )));
                            }
                            tape.kl_divergence(t_logits, sl, &all_true(p.gt_s.len()), variant)
                        }
                        _ => tape.sorted_prob_l1(t_logits, sl),
                    }
                }
            }
        })()
        .map_err(tag(name, step))?;
        out.push((term, v));
    }
    Ok(ExampleTerms {
        terms: out,
        z_q_s,
        z_a_s,
        z_q_l,
        z_a_l,
        t_logits,
    })
}

/// Untracked value of one curve for one example.
fn series_value(
    s: Series,
    models: &Models,
    p: &PairedExample,
    feats: (&Tensor, &Tensor, &Tensor, &Tensor, &Tensor),
) -> Result<f64> {
    let (z_q_s, z_a_s, z_q_l, z_a_l, t_logits) = feats;
    let teacher_head = &models.teacher.params.head;
    let mask_l = all_true(p.gt_l.len());
    match s {
        Series::RecalMixed => {
            let r = models.recal.mixed(z_q_s, z_a_l)?;
            cross_entropy_value(&r.r_a.matmul(teacher_head)?, &p.gt_l, &mask_l)
        }
        Series::RecalTeacher => {
            let r = models.recal.teacher_only(z_q_l, z_a_l)?;
            cross_entropy_value(&r.r_a.matmul(teacher_head)?, &p.gt_l, &mask_l)
        }
        Series::Student => cross_entropy_value(&models.student.logits(z_a_s)?, &p.gt_s, &all_true(p.gt_s.len())),
        Series::Teacher => cross_entropy_value(t_logits, &p.gt_l, &mask_l),
    }
}

/// Curves averaged over `examples`, computed without a tape.
pub fn evaluate_series(models: &Models, examples: &[TrainExample], series: &[Series]) -> Result<BTreeMap<String, f64>> {
    let mut sums = vec![0.0; series.len()];
    for ex in examples {
        check_answer(ex)?;
        let t = TeacherFeatures::compute(&models.teacher, ex)?;
        let s = StudentFeatures::compute(&models.student, ex)?;
        for (acc, &kind) in sums.iter_mut().zip(series) {
            *acc += series_value(kind, models, &ex.pair, (&s.z_q, &s.z_a, &t.z_q, &t.z_a, &t.logits_a))?;
        }
    }
    let n = examples.len().max(1) as f64;
    Ok(series.iter().zip(sums).map(|(s, v)| (s.key().to_string(), v / n)).collect())
}

/// Mean loss, per-component means and mean gradients of a batch.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    /// Mean gradient per trainable tensor name.
    pub grads: BTreeMap<String, Tensor>,
    pub series: BTreeMap<String, f64>,
}

/// Feature caches for frozen models, indexed like the example slice.
#[derive(Default)]
pub struct Caches {
    pub teacher: Option<Vec<TeacherFeatures>>,
    pub student: Option<Vec<StudentFeatures>>,
}

impl Caches {
    /// Caches whatever `stage` leaves frozen.
    pub fn for_stage(models: &Models, stage: &StageConfig, examples: &[TrainExample]) -> Result<Self> {
        let teacher = (!stage.trainable.teacher)
            .then(|| examples.iter().map(|e| TeacherFeatures::compute(&models.teacher, e)).collect())
            .transpose()?;
        let student = (!stage.trainable.student_body)
            .then(|| examples.iter().map(|e| StudentFeatures::compute(&models.student, e)).collect())
            .transpose()?;
        Ok(Self { teacher, student })
    }
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    acc.axpy(1.0, g);
}

/// Sum of per-example losses and gradients over `indices`, in order.
fn accumulate(
    models: &Models,
    stage: &StageConfig,
    examples: &[TrainExample],
    caches: &Caches,
    indices: &[usize],
    step: usize,
    grads: &mut BTreeMap<String, Tensor>,
    components: &mut [f64],
    series: &mut [f64],
) -> Result<()> {
    let trainable = stage.trainable;
    let is_trainable = move |n: &str| trainable.contains(n);
    let need_rec = stage.losses.iter().any(LossTerm::needs_recalibrator);
    for &i in indices {
        let ex = &examples[i];
        let tc = caches.teacher.as_ref().map(|c| &c[i]);
        let sc = caches.student.as_ref().map(|c| &c[i]);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, &is_trainable);
        let bound = Bound::new(&mut binder, models, tc.is_none(), sc.is_none(), need_rec)?;
        let leaves = std::mem::take(&mut binder.bound);
        let et = example_terms(&mut tape, &bound, models, ex, tc, sc, &stage.losses, step)?;
        let mut total = et.terms[0].1;
        for &(_, v) in &et.terms[1..] {
            total = tape.add(total, v)?;
        }
        for (slot, (_, v)) in components.iter_mut().zip(&et.terms) {
            *slot += tape.value(*v).item();
        }
        let vals = |v: Var| tape.value(v);
        let feats = (vals(et.z_q_s), vals(et.z_a_s), vals(et.z_q_l), vals(et.z_a_l), vals(et.t_logits));
        for (slot, &kind) in series.iter_mut().zip(&stage.series) {
            let reuse = match kind {
                Series::RecalMixed => et.terms.iter().find(|(t, _)| *t == LossTerm::ArRecal),
                Series::RecalTeacher => et.terms.iter().find(|(t, _)| *t == LossTerm::RegAr),
                Series::Student => et.terms.iter().find(|(t, _)| *t == LossTerm::ArStudent),
                Series::Teacher => et.terms.iter().find(|(t, _)| *t == LossTerm::ArTeacher),
            };
            *slot += match reuse {
                Some((_, v)) => tape.value(*v).item(),
                None => series_value(kind, models, &ex.pair, feats)?,
            };
        }
        let mut g = tape.backward(total)?;
        for (name, var) in leaves {
            if let Some(gt) = g.take(var) {
                add_into(grads.get_mut(&name).expect("trainable tensor pre-registered"), &gt);
            }
        }
    }
    Ok(())
}

fn zero_grads(models: &Models, trainable: TrainableSet) -> BTreeMap<String, Tensor> {
    models
        .named()
        .into_iter()
        .filter(|(n, _)| trainable.contains(n))
        .map(|(n, t)| (n, Tensor::zeros(t.shape())))
        .collect()
}

/// Loss and gradients of one effective batch: `indices` split into
/// micro-batches of `stage.batch_size`, each averaged, then averaged over
/// the micro-batches.
pub fn batch_loss(
    models: &Models,
    stage: &StageConfig,
    examples: &[TrainExample],
    caches: &Caches,
    indices: &[usize],
    step: usize,
) -> Result<BatchLoss> {
    if indices.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut grads = zero_grads(models, stage.trainable);
    let mut comps = vec![0.0; stage.losses.len()];
    let mut series = vec![0.0; stage.series.len()];
    let chunks: Vec<&[usize]> = indices.chunks(stage.batch_size).collect();
    for chunk in &chunks {
        let mut g = zero_grads(models, stage.trainable);
        accumulate(models, stage, examples, caches, chunk, step, &mut g, &mut comps, &mut series)?;
        let inv = 1.0 / chunk.len() as f64;
        for (name, acc) in grads.iter_mut() {
            acc.axpy(inv, &g[name]);
        }
    }
    let inv_chunks = 1.0 / chunks.len() as f64;
    for acc in grads.values_mut() {
        *acc = acc.map(|v| v * inv_chunks);
    }
    let n = indices.len() as f64;
    let components: BTreeMap<String, f64> = stage
        .losses
        .iter()
        .zip(&comps)
        .map(|(t, v)| (t.name().to_string(), v / n))
        .collect();
    let total = comps.iter().map(|v| v / n).sum();
    if !f64::is_finite(total) {
        let bad = components.iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k.clone());
        return Err(Error::NonFiniteLoss {
            step,
            component: bad.unwrap_or_else(|| "total".into()),
        });
    }
    Ok(BatchLoss {
        total,
        components,
        grads,
        series: stage
            .series
            .iter()
            .zip(series)
            .map(|(s, v)| (s.key().to_string(), v / n))
            .collect(),
    })
}

/// Cycles through a pool in reshuffled epochs.
struct Sampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(pool: Vec<usize>, seed: u64) -> Self {
        Self {
            order: Vec::new(),
            pos: 0,
            pool,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn draw(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Run-wide knobs shared by every stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub seed: u64,
    /// Held-out evaluation every this many steps (0: only at stage ends).
    pub eval_every: usize,
    pub record_wall_time: bool,
    pub baseline: Option<String>,
    /// Index of the first stage in the full plan and the global step it
    /// starts at; non-zero when resuming from a stage checkpoint.
    #[serde(default)]
    pub first_stage: usize,
    #[serde(default)]
    pub first_step: usize,
}

/// Training and held-out examples of one run.
pub struct RunData<'a> {
    pub train: &'a [TrainExample],
    pub probe: &'a [TrainExample],
}

/// Training state of one stage: step counter, optimizer moments, sampler.
pub struct TrainState {
    pub step: usize,
    pub optimizer: AdamW,
    sampler: Sampler,
}

impl TrainState {
    pub fn new(models: &Models, stage: &StageConfig, pool: Vec<usize>, seed: u64) -> Self {
        let named = models.named();
        let trainable: Vec<(&str, &[usize])> = named
            .iter()
            .filter(|(n, _)| stage.trainable.contains(n))
            .map(|(n, t)| (n.as_str(), t.shape()))
            .collect();
        Self {
            step: 0,
            optimizer: AdamW::new(stage.optimizer, trainable),
            sampler: Sampler::new(pool, seed),
        }
    }

    /// Draws the next effective batch, computes its loss and applies one
    /// update at the scheduled learning rate.
    pub fn step(
        &mut self,
        models: &mut Models,
        stage: &StageConfig,
        examples: &[TrainExample],
        caches: &Caches,
        global_step: usize,
    ) -> Result<(f64, BatchLoss)> {
        let indices = self.sampler.draw(stage.effective_batch());
        let loss = batch_loss(models, stage, examples, caches, &indices, global_step)?;
        let lr = linear_lr(stage.lr_start, stage.lr_end, self.step, stage.steps);
        self.optimizer.step(lr, &loss.grads, &mut models.trees_mut())?;
        self.step += 1;
        Ok((lr, loss))
    }
}

fn stage_seed(seed: u64, index: usize) -> u64 {
    seed ^ (0xA5A5_0000 + index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Runs `stages` in order. `on_stage_end` sees the models after each stage
/// (checkpointing lives there).
pub fn run_plan(
    models: &mut Models,
    data: &RunData<'_>,
    stages: &[StageConfig],
    opts: &RunOptions,
    sink: &mut dyn MetricSink,
    on_stage_end: &mut dyn FnMut(&StageConfig, &Models) -> Result<()>,
) -> Result<()> {
    let started = std::time::Instant::now();
    let wall = |on: bool| on.then(|| started.elapsed().as_secs_f64());
    let mut global = opts.first_step;
    for (si, stage) in stages.iter().enumerate() {
        let si = si + opts.first_stage;
        stage.validate()?;
        let pool: Vec<usize> = data
            .train
            .iter()
            .enumerate()
            .filter(|(_, e)| stage.tasks.as_ref().is_none_or(|ts| ts.contains(&e.task)))
            .map(|(i, _)| i)
            .collect();
        if pool.is_empty() {
            return Err(Error::config(format!("{}.tasks", stage.name), "no training examples left"));
        }
        let caches = Caches::for_stage(models, stage, data.train)?;
        let mut state = TrainState::new(models, stage, pool, stage_seed(opts.seed, si));
        let trainable = stage.trainable.to_string();
        let eval_line = |models: &Models, k: usize, global: usize| -> Result<MetricLine> {
            Ok(MetricLine {
                step: global,
                stage: stage.name.clone(),
                stage_step: k,
                split: Some("held-out".into()),
                series: evaluate_series(models, data.probe, &stage.series)?,
                trainable: Some(trainable.clone()),
                baseline: opts.baseline.clone(),
                wall_time: wall(opts.record_wall_time),
                ..Default::default()
            })
        };
        if !data.probe.is_empty() {
            sink.record(&eval_line(models, 0, global)?)?;
        }
        for k in 0..stage.steps {
            let (lr, loss) = state.step(models, stage, data.train, &caches, global)?;
            global += 1;
            sink.record(&MetricLine {
                step: global,
                stage: stage.name.clone(),
                stage_step: k + 1,
                lr: Some(lr),
                loss_total: Some(loss.total),
                components: loss.components,
                series: loss.series,
                trainable: Some(trainable.clone()),
                baseline: opts.baseline.clone(),
                wall_time: wall(opts.record_wall_time),
                ..Default::default()
            })?;
            let periodic = opts.eval_every > 0 && (k + 1) % opts.eval_every == 0;
            if !data.probe.is_empty() && (periodic || k + 1 == stage.steps) {
                sink.record(&eval_line(models, k + 1, global)?)?;
            }
        }
        on_stage_end(stage, models)?;
    }
    Ok(())
}

fn default_lr_start() -> f64 {
    1e-3
}
fn default_lr_end() -> f64 {
    1e-4
}
fn default_accumulation() -> usize {
    4
}
fn default_batch() -> usize {
    8
}

/// User-facing settings of one stage. The stage-specific switches are only
/// accepted on the stage they apply to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub steps: usize,
    #[serde(default = "default_lr_start")]
    pub lr_start: f64,
    #[serde(default = "default_lr_end")]
    pub lr_end: f64,
    #[serde(default = "default_accumulation")]
    pub accumulation: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Stage 1: include the teacher-only regularization terms (default on).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularization: Option<bool>,
    /// Stage 2: keep training the recalibrator (default off).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_recalibrator: Option<bool>,
    /// Stage 2: train the student head as well (default off).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_head: Option<bool>,
    /// Stage 3: restrict the data to these tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<Vec<String>>,
}

impl PhaseConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            lr_start: default_lr_start(),
            lr_end: default_lr_end(),
            accumulation: default_accumulation(),
            batch_size: default_batch(),
            regularization: None,
            train_recalibrator: None,
            train_head: None,
            tasks: None,
        }
    }

    fn stage(&self, name: &str, trainable: TrainableSet, losses: Vec<LossTerm>, series: Vec<Series>, opt: AdamWConfig) -> StageConfig {
        StageConfig {
            name: name.into(),
            steps: self.steps,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            accumulation: self.accumulation,
            batch_size: self.batch_size,
            trainable,
            losses,
            tasks: None,
            series,
            optimizer: opt,
        }
    }
}

fn default_stage1() -> PhaseConfig {
    PhaseConfig::with_steps(2000)
}
fn default_stage2() -> PhaseConfig {
    PhaseConfig::with_steps(4000)
}
fn default_stage3() -> PhaseConfig {
    PhaseConfig::with_steps(1000)
}

/// Three-stage schedule: alignment, distillation, student-only fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default = "default_stage1")]
    pub stage1: PhaseConfig,
    #[serde(default = "default_stage2")]
    pub stage2: PhaseConfig,
    #[serde(default = "default_stage3")]
    pub stage3: PhaseConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            stage1: default_stage1(),
            stage2: default_stage2(),
            stage3: default_stage3(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let misplaced = |stage: &str, field: &str, set: bool| {
            if set {
                Err(Error::config(format!("schedule.{stage}.{field}"), "not used by this stage"))
            } else {
                Ok(())
            }
        };
        misplaced("stage1", "train_recalibrator", self.stage1.train_recalibrator.is_some())?;
        misplaced("stage1", "train_head", self.stage1.train_head.is_some())?;
        misplaced("stage1", "tasks", self.stage1.tasks.is_some())?;
        misplaced("stage2", "regularization", self.stage2.regularization.is_some())?;
        misplaced("stage2", "tasks", self.stage2.tasks.is_some())?;
        misplaced("stage3", "regularization", self.stage3.regularization.is_some())?;
        misplaced("stage3", "train_recalibrator", self.stage3.train_recalibrator.is_some())?;
        misplaced("stage3", "train_head", self.stage3.train_head.is_some())?;
        for (n, p) in [("stage1", &self.stage1), ("stage2", &self.stage2), ("stage3", &self.stage3)] {
            if p.accumulation == 0 || p.batch_size == 0 {
                return Err(Error::config(format!("schedule.{n}.batch_size"), "must be positive"));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stage1.steps + self.stage2.steps + self.stage3.steps
    }

    /// Recalibrator only; mixed-rule CE and KL plus (unless disabled) the
    /// teacher-only regularization pair.
    pub fn stage1(&self) -> StageConfig {
        let mut losses = vec![LossTerm::ArRecal, LossTerm::KlRecal];
        if self.stage1.regularization.unwrap_or(true) {
            losses.extend([LossTerm::RegAr, LossTerm::RegKl]);
        }
        let trainable = TrainableSet {
            recalibrator: true,
            ..Default::default()
        };
        self.stage1.stage("stage1", trainable, losses, Series::ALL.to_vec(), self.optimizer)
    }

    /// Student body (head and recalibrator frozen unless overridden);
    /// mixed-rule CE and KL plus the student's own CE.
    pub fn stage2(&self) -> StageConfig {
        let trainable = TrainableSet {
            student_body: true,
            student_head: self.stage2.train_head.unwrap_or(false),
            recalibrator: self.stage2.train_recalibrator.unwrap_or(false),
            teacher: false,
        };
        let losses = vec![LossTerm::ArRecal, LossTerm::KlRecal, LossTerm::ArStudent];
        self.stage2.stage("stage2", trainable, losses, Series::ALL.to_vec(), self.optimizer)
    }

    /// Whole student, own CE only.
    pub fn stage3(&self) -> StageConfig {
        let trainable = TrainableSet {
            student_body: true,
            student_head: true,
            ..Default::default()
        };
        let mut s = self.stage3.stage("stage3", trainable, vec![LossTerm::ArStudent], Series::ALL.to_vec(), self.optimizer);
        s.tasks = self.stage3.tasks.clone();
        s
    }

    /// A single student-training stage with the budget of all three stages
    /// and the stage-2 learning-rate and batch settings.
    pub fn collapsed(&self, name: &str, losses: Vec<LossTerm>) -> StageConfig {
        let trainable = TrainableSet {
            student_body: true,
            student_head: true,
            ..Default::default()
        };
        let mut s = self.stage2.stage(name, trainable, losses, vec![Series::Student, Series::Teacher], self.optimizer);
        s.steps = self.total_steps();
        s
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::metrics::MemorySink;
    use crate::model::ModelSpec;
    use crate::recalibrator::{RecalibratorConfig, RecalibratorShape};
    use crate::tasks::{gen_data, TaskSpec};
    use crate::tokenizer::{paired_encode, IndexOrdering, SpecialPlacement, SplitScheme, Tokenizer, TokenizerRequest};

    pub(crate) struct Fixture {
        pub models: Models,
        pub train: Vec<TrainExample>,
        pub probe: Vec<TrainExample>,
    }

    fn encode(pairs: &[crate::tasks::QaPair], tl: &Tokenizer, ts: &Tokenizer, models: &Models) -> Vec<TrainExample> {
        let (cl, cs) = (&models.teacher.config, &models.student.config);
        pairs
            .iter()
            .map(|q| {
                let mut p = paired_encode(tl, ts, &q.question, &q.answer, (cl.prefix_len, cs.prefix_len)).unwrap();
                p.payload = q.payload.clone();
                TrainExample::new(&q.task, p, cl, cs)
            })
            .collect()
    }

    /// Tiny heterogeneous pair on a small reverse task. `d_l = 16, d_s = 8`.
    pub(crate) fn fixture(task: &str, same_tokenizer: bool) -> Fixture {
        let spec = TaskSpec {
            n_train: 40,
            n_held_out: 8,
            n_compositional: 4,
            max_len: 4,
            ..TaskSpec::named(task)
        };
        let corpus = gen_data(&[spec.clone()], 1).unwrap();
        let mut text: Vec<String> = corpus.train.iter().flat_map(|p| [p.question.clone(), p.answer.clone()]).collect();
        text.push(crate::tasks::charset(&[spec]).unwrap());
        let req_l = TokenizerRequest {
            scheme: SplitScheme::GreedyMerge,
            ordering: IndexOrdering::FrequencyDescending,
            vocab_size: None,
            specials: SpecialPlacement::Front,
        };
        let req_s = TokenizerRequest {
            scheme: SplitScheme::Character,
            ordering: IndexOrdering::Lexicographic,
            vocab_size: None,
            specials: SpecialPlacement::Back,
        };
        let tl = Tokenizer::build(&text, &TokenizerRequest { vocab_size: Some(30), ..req_l }).unwrap();
        let ts = if same_tokenizer { tl.clone() } else { Tokenizer::build(&text, &req_s).unwrap() };
        let spec_l = ModelSpec {
            n_layers: 1,
            d_hidden: 16,
            n_heads: 2,
            prefix_len: 2,
            ..ModelSpec::teacher_default()
        };
        let spec_s = ModelSpec {
            n_layers: 1,
            d_hidden: 8,
            n_heads: 2,
            prefix_len: 2,
            ..ModelSpec::student_default()
        };
        let teacher = ModelWeights::init(ModelConfig::from_spec(&spec_l, &tl).unwrap()).unwrap();
        let student = ModelWeights::init(ModelConfig::from_spec(&spec_s, &ts).unwrap()).unwrap();
        let recal = RecalibratorWeights::init(
            RecalibratorConfig {
                depth: 1,
                ..Default::default()
            },
            RecalibratorShape::between(&teacher.config, &student.config),
        )
        .unwrap();
        let models = Models { teacher, student, recal };
        let train = encode(&corpus.train, &tl, &ts, &models);
        let probe = encode(&corpus.held_out, &tl, &ts, &models);
        Fixture { models, train, probe }
    }

    fn small_schedule() -> Schedule {
        let phase = |steps| PhaseConfig {
            lr_start: 1e-3,
            lr_end: 1e-4,
            accumulation: 2,
            batch_size: 4,
            ..PhaseConfig::with_steps(steps)
        };
        Schedule {
            stage1: phase(6),
            stage2: phase(6),
            stage3: phase(4),
            optimizer: AdamWConfig::default(),
        }
    }

    fn loss_of(f: &Fixture, stage: &StageConfig, idx: &[usize]) -> BatchLoss {
        let caches = Caches::for_stage(&f.models, stage, &f.train).unwrap();
        batch_loss(&f.models, stage, &f.train, &caches, idx, 0).unwrap()
    }

    #[test]
    fn stage_presets_follow_the_protocol() {
        let s = Schedule::default();
        let (s1, s2, s3) = (s.stage1(), s.stage2(), s.stage3());
        assert_eq!(s1.losses, vec![LossTerm::ArRecal, LossTerm::KlRecal, LossTerm::RegAr, LossTerm::RegKl]);
        assert_eq!(s2.losses, vec![LossTerm::ArRecal, LossTerm::KlRecal, LossTerm::ArStudent]);
        assert_eq!(s3.losses, vec![LossTerm::ArStudent]);
        assert_eq!(s1.trainable.to_string(), "recalibrator");
        assert_eq!(s2.trainable.to_string(), "student-body");
        assert_eq!(s3.trainable.to_string(), "student-body+student-head");
        assert_eq!((s1.steps, s2.steps, s3.steps), (2000, 4000, 1000));
        assert_eq!(s1.effective_batch(), 32);
        assert_eq!(s.collapsed("sft", vec![LossTerm::ArStudent]).steps, 7000);
    }

    #[test]
    fn misplaced_stage_switch_is_rejected() {
        let mut s = Schedule::default();
        s.stage3.train_head = Some(true);
        assert!(matches!(s.validate(), Err(Error::Config { field, .. }) if field == "schedule.stage3.train_head"));
    }

    #[test]
    fn stage1_gradients_touch_only_the_recalibrator() {
        let f = fixture("reverse", false);
        let l = loss_of(&f, &Schedule::default().stage1(), &[0, 1, 2]);
        assert!(!l.grads.is_empty());
        assert!(l.grads.keys().all(|n| n.starts_with(RECALIBRATOR)));
        assert!(l.grads.values().any(|g| g.max_abs() > 0.0));
    }

    #[test]
    fn stage2_reaches_student_body_but_not_teacher() {
        let f = fixture("reverse", false);
        let l = loss_of(&f, &Schedule::default().stage2(), &[0, 1, 2, 3]);
        assert!(l.grads.keys().all(|n| n.starts_with(STUDENT) && n != "student/head"));
        let norm: f64 = l.grads.values().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
        assert!(norm > 0.0);
    }

    #[test]
    fn stage2_recal_terms_alone_reach_the_student_through_its_question() {
        let f = fixture("reverse", false);
        let mut st = Schedule::default().stage2();
        st.losses = vec![LossTerm::ArRecal];
        let l = loss_of(&f, &st, &[0, 1]);
        assert!(l.grads["student/embedding"].max_abs() > 0.0);
    }

    #[test]
    fn components_sum_to_total() {
        let f = fixture("reverse", false);
        for stage in [Schedule::default().stage1(), Schedule::default().stage2()] {
            let l = loss_of(&f, &stage, &[0, 1, 2, 3, 4]);
            let sum: f64 = l.components.values().sum();
            assert!((sum - l.total).abs() < 1e-12, "{sum} vs {}", l.total);
        }
    }

    #[test]
    fn stage3_loss_is_student_cross_entropy() {
        let f = fixture("reverse", false);
        let l = loss_of(&f, &Schedule::default().stage3(), &[3]);
        let ex = &f.train[3];
        let s = StudentFeatures::compute(&f.models.student, ex).unwrap();
        let direct = cross_entropy_value(&f.models.student.logits(&s.z_a).unwrap(), &ex.pair.gt_s, &all_true(ex.pair.gt_s.len())).unwrap();
        assert!((l.total - direct).abs() < 1e-12);
    }

    #[test]
    fn identity_recalibrator_kl_terms_are_nonnegative() {
        let mut f = fixture("reverse", true);
        // Same width on both sides so the identity configuration exists.
        let shape = RecalibratorShape {
            d_student: 16,
            d_teacher: 16,
            n_heads: 2,
            d_ffn: 32,
        };
        let mut rw = RecalibratorWeights::init(RecalibratorConfig::default(), shape).unwrap();
        rw.params.proj_pre = Tensor::identity(16);
        rw.params.proj_post = Tensor::identity(16);
        rw.params.blocks.iter_mut().for_each(crate::nn::BlockParams::zero_residual);
        f.models.recal = rw;
        let ex = &f.train[0];
        let t = TeacherFeatures::compute(&f.models.teacher, ex).unwrap();
        let ts = StudentFeatures {
            z_q: t.z_q.clone(),
            z_a: t.z_a.clone(),
        };
        let mut tape = Tape::new();
        let never = |_: &str| false;
        let mut binder = Binder::new(&mut tape, &never);
        let bound = Bound::new(&mut binder, &f.models, false, false, true).unwrap();
        let terms = [LossTerm::KlRecal, LossTerm::RegKl];
        let et = example_terms(&mut tape, &bound, &f.models, ex, Some(&t), Some(&ts), &terms, 0).unwrap();
        for (_, v) in et.terms {
            assert!(tape.value(v).item() >= 0.0);
        }
    }

    #[test]
    fn frozen_tensors_are_bit_identical_after_each_stage() {
        let mut f = fixture("reverse", false);
        let sched = small_schedule();
        let before = f.models.named();
        let data = RunData {
            train: &f.train,
            probe: &[],
        };
        let opts = RunOptions {
            seed: 3,
            eval_every: 0,
            record_wall_time: false,
            baseline: None,
            ..Default::default()
        };
        for stage in [sched.stage1(), sched.stage2(), sched.stage3()] {
            let snapshot = f.models.named();
            run_plan(&mut f.models, &data, std::slice::from_ref(&stage), &opts, &mut MemorySink::default(), &mut |_, _| Ok(())).unwrap();
            for ((n, a), (_, b)) in snapshot.iter().zip(f.models.named()) {
                if !stage.trainable.contains(n) {
                    assert_eq!(a, &b, "{n} changed in {}", stage.name);
                }
            }
        }
        let changed = |p: &str| before.iter().zip(f.models.named()).any(|((n, a), (_, b))| n.starts_with(p) && a != &b);
        assert!(changed(RECALIBRATOR) && changed(STUDENT) && !changed(TEACHER));
    }

    #[test]
    fn accumulation_matches_a_single_large_batch() {
        let f = fixture("reverse", false);
        let mut a = Schedule::default().stage1();
        a.steps = 5;
        a.lr_start = 1e-3;
        let mut b = a.clone();
        (a.accumulation, a.batch_size) = (4, 2);
        (b.accumulation, b.batch_size) = (1, 8);
        let (mut ma, mut mb) = (f.models.clone(), f.models.clone());
        let run = |m: &mut Models, s: &StageConfig| {
            let caches = Caches::for_stage(m, s, &f.train).unwrap();
            let mut st = TrainState::new(m, s, (0..f.train.len()).collect(), 9);
            for k in 0..s.steps {
                st.step(m, s, &f.train, &caches, k).unwrap();
            }
        };
        run(&mut ma, &a);
        run(&mut mb, &b);
        let mut worst = 0f64;
        for ((_, x), (_, y)) in ma.named().iter().zip(mb.named()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                worst = worst.max((p - q).abs());
            }
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn repeated_runs_emit_identical_metrics() {
        let run = || {
            let mut f = fixture("reverse", false);
            let sched = small_schedule();
            let mut sink = MemorySink::default();
            let data = RunData {
                train: &f.train,
                probe: &f.probe,
            };
            let opts = RunOptions {
                seed: 5,
                eval_every: 3,
                record_wall_time: false,
                baseline: None,
                ..Default::default()
            };
            run_plan(&mut f.models, &data, &[sched.stage1(), sched.stage2()], &opts, &mut sink, &mut |_, _| Ok(())).unwrap();
            (sink.lines, f.models)
        };
        let (l1, m1) = run();
        let (l2, m2) = run();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        assert!(l1.iter().any(|l| l.split.as_deref() == Some("held-out")));
        let stages: Vec<&str> = l1.iter().map(|l| l.trainable.as_deref().unwrap()).collect();
        assert!(stages.contains(&"recalibrator") && stages.contains(&"student-body"));
    }

    #[test]
    fn stage3_leaves_the_recalibrator_untouched() {
        let mut f = fixture("reverse", false);
        let before = f.models.recal.clone();
        let data = RunData {
            train: &f.train,
            probe: &[],
        };
        let opts = RunOptions {
            seed: 1,
            eval_every: 0,
            record_wall_time: false,
            baseline: None,
            ..Default::default()
        };
        run_plan(&mut f.models, &data, &[small_schedule().stage3()], &opts, &mut MemorySink::default(), &mut |_, _| Ok(())).unwrap();
        assert_eq!(f.models.recal, before);
    }

    #[test]
    fn overflowing_loss_names_step_and_component() {
        let mut f = fixture("reverse", false);
        let mut s1 = Schedule::default().stage1();
        s1.losses = vec![LossTerm::ArRecal];
        let caches = Caches::for_stage(&f.models, &s1, &f.train).unwrap();
        // Positive recalibrated rows against a huge constant head overflow to +inf.
        f.models.recal.params.out_norm.b = f.models.recal.params.out_norm.b.map(|_| 4.0);
        f.models.teacher.params.head = f.models.teacher.params.head.map(|_| 1e307);
        match batch_loss(&f.models, &s1, &f.train, &caches, &[0], 17) {
            Err(Error::NonFiniteLoss { step, component }) => {
                assert_eq!(step, 17);
                assert_eq!(component, "ar_recal");
            }
            other => panic!("unexpected {:?}", other.map(|l| l.total)),
        }
    }

    #[test]
    fn empty_answer_is_a_contract_violation() {
        let mut f = fixture("reverse", false);
        f.train[0].pair.gt_s.clear();
        f.train[0].pair.a_s.clear();
        let stage = Schedule::default().stage3();
        let caches = Caches::default();
        assert!(matches!(batch_loss(&f.models, &stage, &f.train, &caches, &[0], 0), Err(Error::Contract(_))));
    }

    #[test]
    fn task_filter_restricts_the_pool() {
        let mut f = fixture("reverse", false);
        let mut stage = small_schedule().stage3();
        stage.tasks = Some(vec!["grid-lookup".into()]);
        let data = RunData {
            train: &f.train,
            probe: &[],
        };
        let opts = RunOptions {
            seed: 1,
            eval_every: 0,
            record_wall_time: false,
            baseline: None,
            ..Default::default()
        };
        let r = run_plan(&mut f.models, &data, &[stage], &opts, &mut MemorySink::default(), &mut |_, _| Ok(()));
        assert!(matches!(r, Err(Error::Config { .. })));
    }
}
