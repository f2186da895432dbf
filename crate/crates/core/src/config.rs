//! Experiment configuration (TOML). Unknown keys are rejected and every
//! validation failure names the offending dotted field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::distiller;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::optim::AdamWConfig;
use crate::recalibrator::RecalibratorConfig;
use crate::tasks::{task, TaskSpec};
use crate::tokenizer::{IndexOrdering, SpecialPlacement, SplitScheme, TokenizerRequest, NUM_SPECIALS};
use crate::training::Schedule;

/// Overrides the root under which relative `output_dir`s are resolved.
pub const OUTPUT_ROOT_ENV: &str = "RECAL_OUTPUT_ROOT";

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_tasks() -> Vec<TaskSpec> {
    vec![TaskSpec::named("reverse")]
}
fn default_distiller() -> String {
    "recal".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerPair {
    #[serde(default = "TokenizerPair::teacher_default")]
    pub teacher: TokenizerRequest,
    #[serde(default = "TokenizerPair::student_default")]
    pub student: TokenizerRequest,
}

impl TokenizerPair {
    fn teacher_default() -> TokenizerRequest {
        TokenizerRequest {
            scheme: SplitScheme::Character,
            ordering: IndexOrdering::FrequencyDescending,
            vocab_size: None,
            specials: SpecialPlacement::Front,
        }
    }

    fn student_default() -> TokenizerRequest {
        TokenizerRequest {
            scheme: SplitScheme::GreedyMerge,
            ordering: IndexOrdering::Lexicographic,
            vocab_size: Some(40),
            specials: SpecialPlacement::Back,
        }
    }
}

impl Default for TokenizerPair {
    fn default() -> Self {
        Self {
            teacher: Self::teacher_default(),
            student: Self::student_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPair {
    #[serde(default = "ModelSpec::teacher_default")]
    pub teacher: ModelSpec,
    #[serde(default = "ModelSpec::student_default")]
    pub student: ModelSpec,
}

impl Default for ModelPair {
    fn default() -> Self {
        Self {
            teacher: ModelSpec::teacher_default(),
            student: ModelSpec::student_default(),
        }
    }
}

/// Teacher pretraining on the task's own CE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub accumulation: usize,
    /// Held-out exact-match accuracy the teacher must reach.
    pub min_accuracy: f64,
    /// Batch sampling during pretraining.
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr_start: 1e-3,
            lr_end: 1e-4,
            batch_size: 16,
            accumulation: 1,
            min_accuracy: 0.95,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out curve evaluation every this many steps (0: stage ends only).
    pub eval_every: usize,
    /// Number of held-out pairs in the probe set.
    pub probe_size: usize,
    /// Generation budget in tokens.
    pub max_new: usize,
    pub record_wall_time: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_every: 100,
            probe_size: 256,
            max_new: 12,
            record_wall_time: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    /// Drives distillation: batch sampling of every stage.
    #[serde(default)]
    pub seed: u64,
    /// Drives corpus generation (and so both tokenizers).
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Pretrained teacher to reuse instead of `<run dir>/teacher.ckpt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Method used by `baseline` when none is given on the command line.
    #[serde(default = "default_distiller")]
    pub distiller: String,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub tokenizers: TokenizerPair,
    #[serde(default)]
    pub models: ModelPair,
    #[serde(default)]
    pub recalibrator: RecalibratorConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Default desk-scale experiment under `run_id`.
    pub fn with_run_id(run_id: &str) -> Self {
        Self {
            run_id: run_id.into(),
            seed: 0,
            data_seed: 0,
            output_dir: default_output_dir(),
            teacher_checkpoint: None,
            distiller: default_distiller(),
            tasks: default_tasks(),
            tokenizers: TokenizerPair::default(),
            models: ModelPair::default(),
            recalibrator: RecalibratorConfig::default(),
            schedule: Schedule::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.run_id.starts_with('.')
        {
            return Err(Error::config("run_id", "must be non-empty [A-Za-z0-9._-] not starting with `.`"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "at least one task is required"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            task(&t.task)
                .and_then(|k| k.validate(t))
                .map_err(|e| relabel(e, &format!("tasks[{i}]")))?;
        }
        for (side, req, spec) in [
            ("teacher", &self.tokenizers.teacher, &self.models.teacher),
            ("student", &self.tokenizers.student, &self.models.student),
        ] {
            if let (Some(want), Some(got)) = (spec.vocab_size, req.vocab_size) {
                if want != got {
                    return Err(Error::config(
                        format!("models.{side}.vocab_size"),
                        format!("{want} disagrees with tokenizers.{side}.vocab_size = {got}"),
                    ));
                }
            }
            if req.scheme == SplitScheme::GreedyMerge && req.vocab_size.is_none_or(|v| v <= NUM_SPECIALS) {
                return Err(Error::config(
                    format!("tokenizers.{side}.vocab_size"),
                    "greedy-merge needs a vocabulary larger than the specials",
                ));
            }
            if spec.n_layers == 0 || spec.prefix_len == 0 {
                return Err(Error::config(format!("models.{side}"), "n_layers and prefix_len must be positive"));
            }
            if spec.n_heads == 0 || spec.d_hidden % spec.n_heads != 0 || (spec.d_hidden / spec.n_heads) % 2 != 0 {
                return Err(Error::config(
                    format!("models.{side}.n_heads"),
                    "d_hidden / n_heads must be a positive even integer",
                ));
            }
        }
        if !(1..=20).contains(&self.recalibrator.depth) {
            return Err(Error::config("recalibrator.depth", "must lie in 1..=20"));
        }
        self.schedule.validate()?;
        let stage3_tasks = self.schedule.stage3.tasks.iter().flatten();
        for t in stage3_tasks {
            if !self.tasks.iter().any(|s| &s.task == t) {
                return Err(Error::config("schedule.stage3.tasks", format!("`{t}` is not among the run's tasks")));
            }
        }
        distiller(&self.distiller)?;
        let p = &self.pretrain;
        if p.batch_size == 0 || p.accumulation == 0 {
            return Err(Error::config("pretrain.batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&p.min_accuracy) {
            return Err(Error::config("pretrain.min_accuracy", "must lie in [0, 1]"));
        }
        if self.eval.probe_size == 0 || self.eval.max_new == 0 {
            return Err(Error::config("eval", "probe_size and max_new must be positive"));
        }
        Ok(())
    }

    /// `<root>/<output_dir>/<run_id>`, where `<root>` comes from
    /// [`OUTPUT_ROOT_ENV`] when it is set and `output_dir` is relative.
    pub fn run_dir(&self) -> PathBuf {
        let base = match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        };
        base.join(&self.run_id)
    }
}

fn relabel(e: Error, field: &str) -> Error {
    match e {
        Error::Config { field: inner, msg } => Error::config(format!("{field}.{}", inner.trim_start_matches("task.")), msg),
        other => Error::config(field, other.to_string()),
    }
}
