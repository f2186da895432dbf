//! Synthetic question/answer tasks and their split generators.
//!
//! Every task yields three disjoint splits: `train`, `held-out` (fresh
//! examples built from the same distribution) and `compositional` (examples
//! that recombine components seen during training in ways training never
//! shows).

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QaPair {
    pub task: String,
    pub question: String,
    pub answer: String,
    /// Content rendered into the prefix slots instead of learned vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Vec<usize>>,
}

impl QaPair {
    fn key(&self) -> (&str, Option<&[usize]>) {
        (&self.question, self.payload.as_deref())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    HeldOut,
    Compositional,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::HeldOut, Split::Compositional];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldOut => "held-out",
            Split::Compositional => "compositional",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::config("split", format!("unknown split `{s}` (train, held-out, compositional)")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub train: Vec<QaPair>,
    pub held_out: Vec<QaPair>,
    pub compositional: Vec<QaPair>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[QaPair] {
        match s {
            Split::Train => &self.train,
            Split::HeldOut => &self.held_out,
            Split::Compositional => &self.compositional,
        }
    }

    /// Fails when any two splits share a (question, payload).
    pub fn check_disjoint(&self) -> Result<()> {
        let train: HashSet<_> = self.train.iter().map(QaPair::key).collect();
        let held: HashSet<_> = self.held_out.iter().map(QaPair::key).collect();
        for (name, other) in [("held-out", &self.held_out), ("compositional", &self.compositional)] {
            if let Some(p) = other.iter().find(|p| train.contains(&p.key())) {
                return Err(Error::Data(format!("{name} example {:?} also appears in train", p.question)));
            }
        }
        if let Some(p) = self.compositional.iter().find(|p| held.contains(&p.key())) {
            return Err(Error::Data(format!(
                "compositional example {:?} also appears in held-out",
                p.question
            )));
        }
        Ok(())
    }

    /// Merges several corpora split-by-split.
    pub fn merge(parts: impl IntoIterator<Item = Corpus>) -> Corpus {
        let mut out = Corpus::default();
        for p in parts {
            out.train.extend(p.train);
            out.held_out.extend(p.held_out);
            out.compositional.extend(p.compositional);
        }
        out
    }
}

fn default_alphabet() -> String {
    "ABCDEF".into()
}
fn default_min_len() -> usize {
    3
}
fn default_max_len() -> usize {
    6
}
fn default_modulus() -> usize {
    7
}
fn default_max_operand() -> usize {
    99
}
fn default_grid() -> usize {
    3
}
fn default_train() -> usize {
    2000
}
fn default_eval() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Registered task name.
    pub task: String,
    #[serde(default = "default_alphabet")]
    pub alphabet: String,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_modulus")]
    pub modulus: usize,
    /// Operands are drawn from `0..=max_operand`.
    #[serde(default = "default_max_operand")]
    pub max_operand: usize,
    /// Grid side length for grid-lookup.
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_eval")]
    pub n_held_out: usize,
    #[serde(default = "default_eval")]
    pub n_compositional: usize,
}

impl TaskSpec {
    pub fn named(task: &str) -> Self {
        Self {
            task: task.into(),
            alphabet: default_alphabet(),
            min_len: default_min_len(),
            max_len: default_max_len(),
            modulus: default_modulus(),
            max_operand: default_max_operand(),
            grid: default_grid(),
            n_train: default_train(),
            n_held_out: default_eval(),
            n_compositional: default_eval(),
        }
    }

    fn symbols(&self) -> Result<Vec<char>> {
        let mut seen = HashSet::new();
        let syms: Vec<char> = self.alphabet.chars().filter(|c| seen.insert(*c)).collect();
        if syms.len() < 2 {
            return Err(Error::config("task.alphabet", "needs at least two distinct symbols"));
        }
        Ok(syms)
    }
}

/// A task generator. Implementations are registered by name in [`task`].
pub trait Task: Send + Sync {
    fn name(&self) -> &'static str;

    /// Every character the task can emit in a question or answer.
    fn charset(&self, spec: &TaskSpec) -> Result<String>;

    /// Draws one example and reports the split it is eligible for
    /// (`Compositional` or not); the generator assigns train/held-out.
    fn sample(&self, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<(QaPair, bool)>;

    /// Checks task-specific constraints on this task config.
    fn validate(&self, spec: &TaskSpec) -> Result<()>;

    fn generate(&self, spec: &TaskSpec, seed: u64) -> Result<Corpus> {
        self.validate(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut corpus = Corpus::default();
        let mut seen: HashSet<(String, Option<Vec<usize>>)> = HashSet::new();
        let want_regular = spec.n_train + spec.n_held_out;
        let (mut regular, mut comp) = (Vec::new(), Vec::new());
        let budget = 200 * (want_regular + spec.n_compositional).max(1);
        for _ in 0..budget {
            if regular.len() == want_regular && comp.len() == spec.n_compositional {
                break;
            }
            let (pair, is_comp) = self.sample(spec, &mut rng)?;
            let bucket = if is_comp { &mut comp } else { &mut regular };
            let cap = if is_comp { spec.n_compositional } else { want_regular };
            if bucket.len() < cap && seen.insert((pair.question.clone(), pair.payload.clone())) {
                bucket.push(pair);
            }
        }
        if regular.len() < want_regular || comp.len() < spec.n_compositional {
            return Err(Error::Data(format!(
                "{}: could only draw {} regular and {} compositional distinct examples",
                self.name(),
                regular.len(),
                comp.len()
            )));
        }
        regular.shuffle(&mut rng);
        corpus.held_out = regular.split_off(spec.n_train);
        corpus.train = regular;
        corpus.compositional = comp;
        corpus.check_disjoint()?;
        Ok(corpus)
    }
}

fn random_string(syms: &[char], len: usize, rng: &mut ChaCha8Rng) -> String {
    (0..len).map(|_| syms[rng.random_range(0..syms.len())]).collect()
}

/// `rev:<s>` → `s` reversed. Compositional: strings containing the bigram
/// formed by the first and last alphabet symbols, which training never shows.
pub struct Reverse;

impl Reverse {
    fn held_bigram(syms: &[char]) -> String {
        [syms[0], syms[syms.len() - 1]].iter().collect()
    }
}

impl Task for Reverse {
    fn name(&self) -> &'static str {
        "reverse"
    }

    fn charset(&self, spec: &TaskSpec) -> Result<String> {
        Ok(format!("rev:{}", spec.symbols()?.iter().collect::<String>()))
    }

    fn validate(&self, spec: &TaskSpec) -> Result<()> {
        let syms = spec.symbols()?;
        if syms.iter().any(|c| "rev:".contains(*c)) {
            return Err(Error::config("task.alphabet", "must not reuse the characters of `rev:`"));
        }
        if spec.min_len < 2 || spec.max_len < spec.min_len {
            return Err(Error::config("task.min_len", "need 2 <= min_len <= max_len"));
        }
        Ok(())
    }

    fn sample(&self, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<(QaPair, bool)> {
        let syms = spec.symbols()?;
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let s = random_string(&syms, len, rng);
        let comp = s.contains(&Self::held_bigram(&syms));
        Ok((
            QaPair {
                task: self.name().into(),
                question: format!("rev:{s}"),
                answer: s.chars().rev().collect(),
                payload: None,
            },
            comp,
        ))
    }
}

/// `<a>+<b> mod <m>` → `(a + b) % m`. Compositional: both operands in the
/// upper half of the range; each operand value still appears in training
/// paired with a lower-half partner.
pub struct ModularAdd;

impl Task for ModularAdd {
    fn name(&self) -> &'static str {
        "modular-add"
    }

    fn charset(&self, _spec: &TaskSpec) -> Result<String> {
        Ok("0123456789+ mod".into())
    }

    fn validate(&self, spec: &TaskSpec) -> Result<()> {
        if spec.modulus < 2 {
            return Err(Error::config("task.modulus", "must be at least 2"));
        }
        if spec.max_operand < 3 {
            return Err(Error::config("task.max_operand", "must be at least 3"));
        }
        Ok(())
    }

    fn sample(&self, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<(QaPair, bool)> {
        let a = rng.random_range(0..=spec.max_operand);
        let b = rng.random_range(0..=spec.max_operand);
        let half = (spec.max_operand + 1) / 2;
        Ok((
            QaPair {
                task: self.name().into(),
                question: format!("{a}+{b} mod {}", spec.modulus),
                answer: ((a + b) % spec.modulus).to_string(),
                payload: None,
            },
            a >= half && b >= half,
        ))
    }
}

/// A `grid × grid` board of alphabet symbols travels in the payload; the
/// question `cell <r><c>` asks for one entry. Compositional: diagonal cells,
/// whose row and column indices each appear in training off the diagonal.
pub struct GridLookup;

impl Task for GridLookup {
    fn name(&self) -> &'static str {
        "grid-lookup"
    }

    fn charset(&self, spec: &TaskSpec) -> Result<String> {
        let digits: String = (0..spec.grid).map(|d| char::from_digit(d as u32, 10).unwrap_or('0')).collect();
        Ok(format!("cel {digits}{}", spec.symbols()?.iter().collect::<String>()))
    }

    fn validate(&self, spec: &TaskSpec) -> Result<()> {
        if !(2..=10).contains(&spec.grid) {
            return Err(Error::config("task.grid", "must lie in 2..=10"));
        }
        if spec.symbols()?.iter().any(|c| "cel 0123456789".contains(*c)) {
            return Err(Error::config("task.alphabet", "must not reuse digits or the characters of `cell `"));
        }
        Ok(())
    }

    fn sample(&self, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<(QaPair, bool)> {
        let syms = spec.symbols()?;
        let g = spec.grid;
        let board: Vec<usize> = (0..g * g).map(|_| rng.random_range(0..syms.len())).collect();
        let (r, c) = (rng.random_range(0..g), rng.random_range(0..g));
        Ok((
            QaPair {
                task: self.name().into(),
                question: format!("cell {r}{c}"),
                answer: syms[board[r * g + c]].to_string(),
                payload: Some(board),
            },
            r == c,
        ))
    }
}

type TaskCtor = fn() -> Box<dyn Task>;

const REGISTRY: &[(&str, TaskCtor)] = &[
    ("reverse", || Box::new(Reverse)),
    ("modular-add", || Box::new(ModularAdd)),
    ("grid-lookup", || Box::new(GridLookup)),
];

pub fn task_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

/// Looks up a task generator by name.
pub fn task(name: &str) -> Result<Box<dyn Task>> {
    REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, ctor)| ctor())
        .ok_or_else(|| Error::config("task.task", format!("unknown task `{name}` (known: {})", task_names().join(", "))))
}

/// Generates and merges the corpora of several task specs. Each task gets
/// its own seed stream derived from `seed` and its position.
pub fn gen_data(specs: &[TaskSpec], seed: u64) -> Result<Corpus> {
    if specs.is_empty() {
        return Err(Error::config("tasks", "at least one task is required"));
    }
    let corpus = Corpus::merge(
        specs
            .iter()
            .enumerate()
            .map(|(i, s)| task(&s.task)?.generate(s, seed.wrapping_add(0x9e37 * i as u64)))
            .collect::<Result<Vec<_>>>()?,
    );
    corpus.check_disjoint()?;
    Ok(corpus)
}

/// Characters every tokenizer of the run must cover.
pub fn charset(specs: &[TaskSpec]) -> Result<String> {
    let mut seen = HashSet::new();
    let mut out = String::new();
    for s in specs {
        for c in task(&s.task)?.charset(s)?.chars() {
            if seen.insert(c) {
                out.push(c);
            }
        }
    }
    Ok(out)
}
