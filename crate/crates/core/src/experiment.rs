//! End-to-end runs: data and tokenizers from a config, teacher pretraining,
//! distillation with per-stage checkpoints, and exact-match evaluation.
//!
//! Layout of a run directory:
//!
//! ```text
//! <run dir>/config.toml            resolved configuration
//! <run dir>/teacher.tokvocab       tokenizers
//! <run dir>/student.tokvocab
//! <run dir>/teacher.ckpt           pretrained teacher
//! <run dir>/teacher.metrics.jsonl  its training curve
//! <run dir>/stage{1,2,3}.ckpt      student + recalibrator after each stage
//! <run dir>/metrics.jsonl
//! <run dir>/baseline-<method>/     comparator runs, same layout
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::baselines::Distiller;
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{JsonlSink, MetricSink, Series};
use crate::model::{ModelConfig, ModelWeights};
use crate::recalibrator::{RecalibratorShape, RecalibratorWeights};
use crate::tasks::{charset, gen_data, Corpus, QaPair, Split};
use crate::tokenizer::{paired_encode, Tokenizer};
use crate::training::{run_plan, LossTerm, Models, RunData, RunOptions, StageConfig, TrainExample, TrainableSet, TEACHER};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TEACHER_CKPT: &str = "teacher.ckpt";

/// Everything derived deterministically from a config before training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub corpus: Corpus,
    pub tok_l: Tokenizer,
    pub tok_s: Tokenizer,
    pub cfg_l: ModelConfig,
    pub cfg_s: ModelConfig,
}

/// Tokenizer training text: every train question and answer plus the full
/// task character set, so held-out strings always encode.
pub fn tokenizer_corpus(corpus: &Corpus, charset: &str) -> Vec<String> {
    let mut text: Vec<String> = corpus
        .train
        .iter()
        .flat_map(|p| [p.question.clone(), p.answer.clone()])
        .collect();
    text.push(charset.to_string());
    text
}

impl Prepared {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let corpus = gen_data(&config.tasks, config.data_seed)?;
        let text = tokenizer_corpus(&corpus, &charset(&config.tasks)?);
        let tok_l = Tokenizer::build(&text, &config.tokenizers.teacher)?;
        let tok_s = Tokenizer::build(&text, &config.tokenizers.student)?;
        let cfg_l = ModelConfig::from_spec(&config.models.teacher, &tok_l).map_err(|e| side_error(e, "teacher"))?;
        let cfg_s = ModelConfig::from_spec(&config.models.student, &tok_s).map_err(|e| side_error(e, "student"))?;
        Ok(Self {
            config,
            corpus,
            tok_l,
            tok_s,
            cfg_l,
            cfg_s,
        })
    }

    pub fn encode(&self, pairs: &[QaPair]) -> Result<Vec<TrainExample>> {
        pairs
            .iter()
            .map(|q| {
                let mut p = paired_encode(
                    &self.tok_l,
                    &self.tok_s,
                    &q.question,
                    &q.answer,
                    (self.cfg_l.prefix_len, self.cfg_s.prefix_len),
                )?;
                p.payload = q.payload.clone();
                Ok(TrainExample::new(&q.task, p, &self.cfg_l, &self.cfg_s))
            })
            .collect()
    }

    /// Leading `probe_size` held-out pairs.
    pub fn probe_pairs(&self) -> &[QaPair] {
        let h = &self.corpus.held_out;
        &h[..self.config.eval.probe_size.min(h.len())]
    }

    /// Freshly initialized teacher, student and recalibrator.
    pub fn fresh_models(&self) -> Result<Models> {
        let teacher = ModelWeights::init(self.cfg_l.clone())?;
        let student = ModelWeights::init(self.cfg_s.clone())?;
        let recal = RecalibratorWeights::init(
            self.config.recalibrator.clone(),
            RecalibratorShape::between(&self.cfg_l, &self.cfg_s),
        )?;
        Ok(Models { teacher, student, recal })
    }

    /// Serialized subset of the config that determines the teacher.
    pub fn teacher_fingerprint(&self) -> Result<String> {
        let c = &self.config;
        Ok(serde_json::to_string(&(
            c.data_seed,
            &c.tasks,
            &c.tokenizers.teacher,
            &c.models.teacher,
            &c.pretrain,
        ))?)
    }
}

fn side_error(e: Error, side: &str) -> Error {
    match e {
        Error::Config { field, msg } => Error::config(format!("models.{side}.{field}"), msg),
        other => Error::config(format!("models.{side}"), other.to_string()),
    }
}

/// Fraction of `pairs` whose greedy completion equals the reference answer.
pub fn eval_accuracy(model: &ModelWeights, tok: &Tokenizer, pairs: &[QaPair], max_new: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let mut hits = 0usize;
    for p in pairs {
        if model.generate(tok, &p.question, max_new, p.payload.as_deref())? == p.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Writes `bytes` to `path` through a sibling temporary file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_if_absent(path: &Path, contents: &str) -> Result<()> {
    if !path.exists() {
        write_atomic(path, contents.as_bytes())?;
    }
    Ok(())
}

/// Writes each split as JSON lines: `<dir>/<split>.jsonl`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for s in Split::ALL {
        let mut text = String::new();
        for p in corpus.split(s) {
            text.push_str(&serde_json::to_string(p)?);
            text.push('\n');
        }
        let path = dir.join(format!("{}.jsonl", s.name()));
        write_atomic(&path, text.as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

pub fn read_split(path: &Path) -> Result<Vec<QaPair>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Writes the resolved config and both tokenizers into `dir`.
pub fn write_run_header(prep: &Prepared, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_if_absent(&dir.join("config.toml"), &prep.config.to_toml()?)?;
    write_if_absent(&dir.join("teacher.tokvocab"), &prep.tok_l.to_text())?;
    write_if_absent(&dir.join("student.tokvocab"), &prep.tok_s.to_text())?;
    Ok(())
}

pub struct PretrainOutcome {
    pub teacher: ModelWeights,
    pub held_out_accuracy: f64,
}

/// Trains the teacher on its own CE, then measures held-out exact match.
/// Fails with [`Error::TeacherGate`] below `pretrain.min_accuracy`.
pub fn pretrain_teacher(prep: &Prepared, sink: &mut dyn MetricSink) -> Result<PretrainOutcome> {
    let p = &prep.config.pretrain;
    let mut models = prep.fresh_models()?;
    let train = prep.encode(&prep.corpus.train)?;
    let probe = prep.encode(prep.probe_pairs())?;
    let stage = StageConfig {
        name: "pretrain".into(),
        steps: p.steps,
        lr_start: p.lr_start,
        lr_end: p.lr_end,
        accumulation: p.accumulation,
        batch_size: p.batch_size,
        trainable: TrainableSet {
            teacher: true,
            ..Default::default()
        },
        losses: vec![LossTerm::ArTeacher],
        tasks: None,
        series: vec![Series::Teacher],
        optimizer: p.optimizer,
    };
    let opts = RunOptions {
        seed: p.seed,
        eval_every: prep.config.eval.eval_every,
        record_wall_time: prep.config.eval.record_wall_time,
        ..Default::default()
    };
    let data = RunData {
        train: &train,
        probe: &probe,
    };
    run_plan(&mut models, &data, &[stage], &opts, sink, &mut |_, _| Ok(()))?;
    let acc = eval_accuracy(&models.teacher, &prep.tok_l, &prep.corpus.held_out, prep.config.eval.max_new)?;
    if acc < p.min_accuracy {
        return Err(Error::TeacherGate {
            accuracy: acc,
            required: p.min_accuracy,
        });
    }
    Ok(PretrainOutcome {
        teacher: models.teacher,
        held_out_accuracy: acc,
    })
}

pub fn teacher_checkpoint(prep: &Prepared, out: &PretrainOutcome) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.meta.insert("kind".into(), "teacher".into());
    ck.meta.insert("fingerprint".into(), prep.teacher_fingerprint()?);
    ck.meta.insert("held_out_accuracy".into(), format!("{}", out.held_out_accuracy));
    ck.add_params(TEACHER, &out.teacher.params);
    Ok(ck)
}

/// Restores a teacher checkpoint written under an identical teacher
/// configuration.
pub fn load_teacher(prep: &Prepared, path: &Path) -> Result<ModelWeights> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.get("fingerprint") != Some(&prep.teacher_fingerprint()?) {
        return Err(Error::config(
            "teacher_checkpoint",
            format!("{} was trained under a different teacher configuration", path.display()),
        ));
    }
    let mut teacher = ModelWeights::init(prep.cfg_l.clone())?;
    ck.restore(TEACHER, &mut teacher.params)?;
    Ok(teacher)
}

/// Pretrains the teacher into `<run dir>/teacher.ckpt`. Write-once.
pub fn pretrain_into(prep: &Prepared, dir: &Path) -> Result<(PathBuf, f64)> {
    let path = dir.join(TEACHER_CKPT);
    if path.exists() {
        return Err(Error::config("run_id", format!("{} already exists", path.display())));
    }
    write_run_header(prep, dir)?;
    let mut sink = JsonlSink::create(&dir.join("teacher.metrics.jsonl"))?;
    let out = pretrain_teacher(prep, &mut sink)?;
    write_atomic(&path, &teacher_checkpoint(prep, &out)?.to_bytes()?)?;
    Ok((path, out.held_out_accuracy))
}

/// The configured teacher checkpoint, else the run directory's, else a
/// freshly pretrained one saved there.
pub fn obtain_teacher(prep: &Prepared) -> Result<ModelWeights> {
    if let Some(p) = &prep.config.teacher_checkpoint {
        return load_teacher(prep, p);
    }
    let dir = prep.config.run_dir();
    let path = dir.join(TEACHER_CKPT);
    if !path.exists() {
        pretrain_into(prep, &dir)?;
    }
    load_teacher(prep, &path)
}

/// Which stages of a plan to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelect {
    All,
    /// One stage (1-based); later stages resume from the previous stage's
    /// checkpoint.
    Only(usize),
}

impl std::str::FromStr for StageSelect {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(StageSelect::All),
            _ => match s.trim_start_matches("stage").parse::<usize>() {
                Ok(k) if k >= 1 => Ok(StageSelect::Only(k)),
                _ => Err(Error::config("stage", format!("expected `all` or a stage number, got `{s}`"))),
            },
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub models: Models,
}

pub fn checkpoint_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{stage}.ckpt"))
}

/// Runs `method`'s plan (or one stage of it) into `dir`.
pub fn run_training(
    prep: &Prepared,
    teacher: ModelWeights,
    method: &dyn Distiller,
    select: StageSelect,
    dir: &Path,
) -> Result<RunOutcome> {
    method.check_compatible(&prep.tok_l, &prep.tok_s)?;
    let plan = method.plan(&prep.config.schedule);
    let (first, stages) = match select {
        StageSelect::All => (0, plan.clone()),
        StageSelect::Only(k) if k <= plan.len() => (k - 1, vec![plan[k - 1].clone()]),
        StageSelect::Only(k) => {
            return Err(Error::config("stage", format!("{} has {} stage(s), not {k}", method.name(), plan.len())))
        }
    };
    let metrics = match select {
        StageSelect::All => dir.join(METRICS_FILE),
        StageSelect::Only(k) => dir.join(format!("metrics.stage{k}.jsonl")),
    };
    if metrics.exists() {
        return Err(Error::config("run_id", format!("{} already exists; outputs are write-once", metrics.display())));
    }
    let mut models = prep.fresh_models()?;
    models.teacher = teacher;
    if first > 0 {
        let prev = checkpoint_path(dir, &plan[first - 1].name);
        models.restore(&Checkpoint::load(&prev)?)?;
    }
    write_run_header(prep, dir)?;
    let train = prep.encode(&prep.corpus.train)?;
    let probe = prep.encode(prep.probe_pairs())?;
    let opts = RunOptions {
        seed: prep.config.seed,
        eval_every: prep.config.eval.eval_every,
        record_wall_time: prep.config.eval.record_wall_time,
        baseline: method.baseline_label(),
        first_stage: first,
        first_step: plan[..first].iter().map(|s| s.steps).sum(),
    };
    let mut sink = JsonlSink::create(&metrics)?;
    let mut saved: Vec<PathBuf> = Vec::new();
    let mut step = opts.first_step;
    let run_id = prep.config.run_id.clone();
    let method_name = method.name();
    run_plan(
        &mut models,
        &RunData {
            train: &train,
            probe: &probe,
        },
        &stages,
        &opts,
        &mut sink,
        &mut |stage, models| {
            step += stage.steps;
            let path = checkpoint_path(dir, &stage.name);
            let mut ck = models.checkpoint();
            ck.meta.insert("run_id".into(), run_id.clone());
            ck.meta.insert("method".into(), method_name.clone());
            ck.meta.insert("stage".into(), stage.name.clone());
            ck.meta.insert("step".into(), step.to_string());
            ck.to_bytes()
                .and_then(|b| write_atomic(&path, &b))
                .map_err(|e| Error::CheckpointWrite {
                    path: path.display().to_string(),
                    completed: saved.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "),
                    source: Box::new(e),
                })?;
            saved.push(path);
            Ok(())
        },
    )?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        metrics,
        checkpoints: saved,
        models,
    })
}

/// Directory of a comparator run inside the main run directory.
pub fn baseline_dir(config: &ExperimentConfig, method: &str) -> PathBuf {
    let safe: String = method
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    config.run_dir().join(format!("baseline-{safe}"))
}

/// Student + recalibrator restored from a stage checkpoint onto fresh
/// models (the teacher stays at initialization unless given).
pub fn models_from_checkpoint(prep: &Prepared, path: &Path, teacher: Option<ModelWeights>) -> Result<Models> {
    let mut models = prep.fresh_models()?;
    if let Some(t) = teacher {
        models.teacher = t;
    }
    models.restore(&Checkpoint::load(path)?)?;
    Ok(models)
}
