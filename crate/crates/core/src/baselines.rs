//! Distillation methods behind one trait, selected by name at run time.
//!
//! `recal` runs the three-stage recalibrator protocol. The comparators
//! collapse the same step budget into one student-training stage:
//! `sft` (student CE only), `kl-forward` / `kl-reverse` / `kl-skewed(λ)`
//! (CE plus a logit KL that needs identical tokenizers) and
//! `sorted-logit-pad` (CE plus L1 between sorted answer distributions, a
//! simple stand-in for cross-vocabulary transport methods).

use crate::error::{Error, Result};
use crate::loss::KlVariant;
use crate::tokenizer::Tokenizer;
use crate::training::{batch_loss, Caches, LossTerm, Models, Schedule, StageConfig, TrainExample};

pub trait Distiller: Send + Sync {
    /// Registry name, including any parameter.
    fn name(&self) -> String;

    /// Rejects tokenizer pairs this method cannot handle.
    fn check_compatible(&self, teacher: &Tokenizer, student: &Tokenizer) -> Result<()>;

    /// Stages to run, in order.
    fn plan(&self, schedule: &Schedule) -> Vec<StageConfig>;

    /// Tag written into the metric stream; `None` for the primary method.
    fn baseline_label(&self) -> Option<String> {
        Some(self.name())
    }
}

/// Describes every axis on which two tokenizers differ.
pub fn token_type_diff(teacher: &Tokenizer, student: &Tokenizer) -> Vec<String> {
    let (a, b) = (teacher.descriptor(), student.descriptor());
    let mut out = Vec::new();
    if a.vocab_size != b.vocab_size {
        out.push(format!("vocabulary size {} vs {}", a.vocab_size, b.vocab_size));
    }
    if a.split_scheme != b.split_scheme {
        out.push(format!("token splits {} vs {}", a.split_scheme, b.split_scheme));
    }
    if a.index_ordering != b.index_ordering {
        out.push(format!("index ordering {} vs {}", a.index_ordering, b.index_ordering));
    }
    if out.is_empty() && teacher != student {
        out.push("same descriptor but different vocabulary entries".into());
    }
    out
}

fn require_same_tokenizer(method: &str, teacher: &Tokenizer, student: &Tokenizer) -> Result<()> {
    let diff = token_type_diff(teacher, student);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::TokenTypeMismatch(format!(
            "{method} compares logits position by position and needs one shared tokenizer; teacher and student differ in {}",
            diff.join(", ")
        )))
    }
}

pub struct Recal;

impl Distiller for Recal {
    fn name(&self) -> String {
        "recal".into()
    }

    fn check_compatible(&self, _teacher: &Tokenizer, _student: &Tokenizer) -> Result<()> {
        Ok(())
    }

    fn plan(&self, schedule: &Schedule) -> Vec<StageConfig> {
        vec![schedule.stage1(), schedule.stage2(), schedule.stage3()]
    }

    fn baseline_label(&self) -> Option<String> {
        None
    }
}

pub struct Sft;

impl Distiller for Sft {
    fn name(&self) -> String {
        "sft".into()
    }

    fn check_compatible(&self, _teacher: &Tokenizer, _student: &Tokenizer) -> Result<()> {
        Ok(())
    }

    fn plan(&self, schedule: &Schedule) -> Vec<StageConfig> {
        vec![schedule.collapsed("sft", vec![LossTerm::ArStudent])]
    }
}

pub struct LogitKl(pub KlVariant);

impl Distiller for LogitKl {
    fn name(&self) -> String {
        match self.0 {
            KlVariant::Forward => "kl-forward".into(),
            KlVariant::Reverse => "kl-reverse".into(),
            KlVariant::Skewed(l) => format!("kl-skewed({l})"),
        }
    }

    fn check_compatible(&self, teacher: &Tokenizer, student: &Tokenizer) -> Result<()> {
        require_same_tokenizer(&self.name(), teacher, student)
    }

    fn plan(&self, schedule: &Schedule) -> Vec<StageConfig> {
        vec![schedule.collapsed(&self.name(), vec![LossTerm::ArStudent, LossTerm::LogitKl(self.0)])]
    }
}

pub struct SortedLogitPad;

impl Distiller for SortedLogitPad {
    fn name(&self) -> String {
        "sorted-logit-pad".into()
    }

    fn check_compatible(&self, _teacher: &Tokenizer, _student: &Tokenizer) -> Result<()> {
        Ok(())
    }

    fn plan(&self, schedule: &Schedule) -> Vec<StageConfig> {
        vec![schedule.collapsed("sorted-logit-pad", vec![LossTerm::ArStudent, LossTerm::SortedPad])]
    }
}

pub const DEFAULT_SKEW: f64 = 0.1;

type Ctor = fn(Option<&str>) -> Result<Box<dyn Distiller>>;

fn no_arg(name: &str, arg: Option<&str>) -> Result<()> {
    match arg {
        None => Ok(()),
        Some(a) => Err(Error::config("distiller", format!("`{name}` takes no parameter, got `{a}`"))),
    }
}

const REGISTRY: &[(&str, Ctor)] = &[
    ("recal", |a| no_arg("recal", a).map(|_| Box::new(Recal) as Box<dyn Distiller>)),
    ("sft", |a| no_arg("sft", a).map(|_| Box::new(Sft) as Box<dyn Distiller>)),
    ("kl-forward", |a| {
        no_arg("kl-forward", a).map(|_| Box::new(LogitKl(KlVariant::Forward)) as Box<dyn Distiller>)
    }),
    ("kl-reverse", |a| {
        no_arg("kl-reverse", a).map(|_| Box::new(LogitKl(KlVariant::Reverse)) as Box<dyn Distiller>)
    }),
    ("kl-skewed", |a| {
        let lambda = match a {
            None => DEFAULT_SKEW,
            Some(s) => match format!("skewed({s})").parse::<KlVariant>()? {
                KlVariant::Skewed(l) => l,
                _ => unreachable!("skewed prefix parses to the skewed variant"),
            },
        };
        Ok(Box::new(LogitKl(KlVariant::Skewed(lambda))))
    }),
    ("sorted-logit-pad", |a| {
        no_arg("sorted-logit-pad", a).map(|_| Box::new(SortedLogitPad) as Box<dyn Distiller>)
    }),
];

pub fn distiller_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

/// Resolves `name` or `name(param)`.
pub fn distiller(spec: &str) -> Result<Box<dyn Distiller>> {
    let (name, arg) = match spec.split_once('(') {
        Some((n, rest)) => {
            let arg = rest
                .strip_suffix(')')
                .ok_or_else(|| Error::config("distiller", format!("unbalanced parameter in `{spec}`")))?;
            (n, Some(arg))
        }
        None => (spec, None),
    };
    let ctor = REGISTRY.iter().find(|(n, _)| *n == name).map(|(_, c)| c).ok_or_else(|| {
        Error::config(
            "distiller",
            format!("unknown method `{name}` (known: {})", distiller_names().join(", ")),
        )
    })?;
    ctor(arg)
}

/// Mean loss of one comparator step on `batch` (no update).
pub fn baseline_step(
    method: &dyn Distiller,
    schedule: &Schedule,
    models: &Models,
    batch: &[TrainExample],
    teacher_tok: &Tokenizer,
    student_tok: &Tokenizer,
) -> Result<f64> {
    method.check_compatible(teacher_tok, student_tok)?;
    let stage = method
        .plan(schedule)
        .into_iter()
        .last()
        .ok_or_else(|| Error::contract("distiller produced an empty plan"))?;
    let caches = Caches::for_stage(models, &stage, batch)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    Ok(batch_loss(models, &stage, batch, &caches, &idx, 0)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use crate::training::tests::fixture;
    use crate::training::{StudentFeatures, TeacherFeatures};
    use proptest::prelude::*;

    fn tokenizers(same: bool) -> (Tokenizer, Tokenizer) {
        use crate::tokenizer::{IndexOrdering, SpecialPlacement, SplitScheme, TokenizerRequest};
        let text: Vec<String> = ["rev:ABCAB", "BACBA", "rev:CCAB"].iter().map(|s| s.to_string()).collect();
        let l = Tokenizer::build(
            &text,
            &TokenizerRequest {
                scheme: SplitScheme::GreedyMerge,
                ordering: IndexOrdering::FrequencyDescending,
                vocab_size: Some(16),
                specials: SpecialPlacement::Front,
            },
        )
        .unwrap();
        if same {
            return (l.clone(), l);
        }
        let s = Tokenizer::build(
            &text,
            &TokenizerRequest {
                scheme: SplitScheme::Character,
                ordering: IndexOrdering::Lexicographic,
                vocab_size: None,
                specials: SpecialPlacement::Back,
            },
        )
        .unwrap();
        (l, s)
    }

    #[test]
    fn registry_resolves_every_method() {
        for n in distiller_names() {
            assert_eq!(distiller(n).unwrap().name().split('(').next().unwrap(), n);
        }
        assert_eq!(distiller("kl-skewed").unwrap().name(), "kl-skewed(0.1)");
        assert_eq!(distiller("kl-skewed(0.25)").unwrap().name(), "kl-skewed(0.25)");
        assert!(distiller("kl-skewed(1.5)").is_err());
        assert!(distiller("sft(2)").is_err());
        assert!(distiller("dpo").is_err());
    }

    #[test]
    fn kl_methods_reject_heterogeneous_tokenizers() {
        let (l, s) = tokenizers(false);
        for n in ["kl-forward", "kl-reverse", "kl-skewed"] {
            let err = distiller(n).unwrap().check_compatible(&l, &s).unwrap_err();
            let Error::TokenTypeMismatch(msg) = err else { panic!("wrong error for {n}") };
            assert!(msg.contains("vocabulary size") && msg.contains("token splits") && msg.contains("index ordering"), "{msg}");
        }
        for n in ["recal", "sft", "sorted-logit-pad"] {
            distiller(n).unwrap().check_compatible(&l, &s).unwrap();
        }
        let (a, b) = tokenizers(true);
        distiller("kl-forward").unwrap().check_compatible(&a, &b).unwrap();
    }

    #[test]
    fn collapsed_budget_matches_the_three_stages() {
        let sched = Schedule::default();
        for n in ["sft", "kl-forward", "sorted-logit-pad"] {
            let plan = distiller(n).unwrap().plan(&sched);
            assert_eq!(plan.len(), 1);
            assert_eq!(plan[0].steps, sched.total_steps());
        }
        assert_eq!(distiller("recal").unwrap().plan(&sched).len(), 3);
    }

    #[test]
    fn self_distillation_kl_vanishes() {
        let mut f = fixture("reverse", true);
        f.models.student = f.models.teacher.clone();
        let ex = &f.train[..4];
        let (tl, _) = tokenizers(true);
        let sched = Schedule::default();
        // The fixture's tokenizer differs from `tl`, so check compatibility on the fixture pair itself.
        let _ = tl;
        let kl = LogitKl(KlVariant::Forward).plan(&sched).remove(0);
        let sft = Sft.plan(&sched).remove(0);
        let caches = Caches::for_stage(&f.models, &kl, ex).unwrap();
        let idx: Vec<usize> = (0..ex.len()).collect();
        let with_kl = batch_loss(&f.models, &kl, ex, &caches, &idx, 0).unwrap();
        let ce = batch_loss(&f.models, &sft, ex, &caches, &idx, 0).unwrap();
        assert!(with_kl.components["logit_kl"].abs() < 1e-12);
        assert!((with_kl.total - ce.total).abs() < 1e-12);
    }

    #[test]
    fn baseline_step_checks_the_tokenizer_pair() {
        let f = fixture("reverse", false);
        let (l, s) = tokenizers(false);
        let r = baseline_step(&LogitKl(KlVariant::Forward), &Schedule::default(), &f.models, &f.train[..2], &l, &s);
        assert!(matches!(r, Err(Error::TokenTypeMismatch(_))));
        let v = baseline_step(&SortedLogitPad, &Schedule::default(), &f.models, &f.train[..2], &l, &s).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    fn sorted_pad_direct(p: &[f64], q: &[f64]) -> f64 {
        let mut a = p.to_vec();
        let mut b = q.to_vec();
        a.sort_by(|x, y| y.total_cmp(x));
        b.sort_by(|x, y| y.total_cmp(x));
        let n = a.len().max(b.len());
        a.resize(n, 0.0);
        b.resize(n, 0.0);
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
    }

    fn sorted_pad_tape(p: &[f64], q: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let lp = tape.constant(Tensor::new(vec![1, p.len()], p.iter().map(|v| v.ln()).collect()).unwrap()).unwrap();
        let lq = tape.constant(Tensor::new(vec![1, q.len()], q.iter().map(|v| v.ln()).collect()).unwrap()).unwrap();
        let l = tape.sorted_prob_l1(lp, lq).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn sorted_pad_on_vocabularies_of_three_and_five() {
        let p = [0.2, 0.5, 0.3];
        let q = [0.1, 0.05, 0.4, 0.25, 0.2];
        // Sorted: (0.5, 0.3, 0.2, 0, 0) vs (0.4, 0.25, 0.2, 0.1, 0.05).
        let hand = 0.1 + 0.05 + 0.0 + 0.1 + 0.05;
        assert!((sorted_pad_direct(&p, &q) - hand).abs() < 1e-15);
        assert!((sorted_pad_tape(&p, &q) - hand).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn sorted_pad_ignores_vocabulary_permutations(
            raw in proptest::collection::vec(0.01f64..1.0, 5),
            other in proptest::collection::vec(0.01f64..1.0, 3),
            shift in 0usize..5,
        ) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let p = norm(&raw);
            let q = norm(&other);
            let mut rotated = p.clone();
            rotated.rotate_left(shift);
            let mut reversed = q.clone();
            reversed.reverse();
            prop_assert_eq!(sorted_pad_tape(&p, &q), sorted_pad_tape(&rotated, &reversed));
        }
    }

    #[test]
    fn student_features_and_teacher_features_have_matching_answer_rows_on_shared_tokenizer() {
        let f = fixture("reverse", true);
        let ex = &f.train[0];
        let t = TeacherFeatures::compute(&f.models.teacher, ex).unwrap();
        let s = StudentFeatures::compute(&f.models.student, ex).unwrap();
        assert_eq!(t.z_a.rows(), s.z_a.rows());
    }
}
