use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use recal_core::baselines::distiller;
use recal_core::config::ExperimentConfig;
use recal_core::diagnostics::{
    alignment_csv, centroid_drift, cosine_alignment, diagonal_dominance, drift_csv, heatmap_svg, perplexity_csv,
    perplexity_series, perplexity_svg, write_artifacts,
};
use recal_core::experiment::{
    baseline_dir, checkpoint_path, eval_accuracy, load_teacher, models_from_checkpoint, obtain_teacher, pretrain_into,
    run_training, write_corpus, Prepared, StageSelect, METRICS_FILE, TEACHER_CKPT,
};
use recal_core::metrics::read_jsonl;
use recal_core::tasks::Split;

#[derive(Parser)]
#[command(name = "recal", version, about = "Cross-tokenizer distillation through a feature recalibrator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train / held-out / compositional splits as JSON lines.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: <run dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the teacher on the task and enforce the accuracy gate.
    PretrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the three-stage recalibrator protocol.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `all`, or a single stage number resuming from the previous checkpoint.
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Train a comparator method with the same total step budget.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        /// sft, kl-forward, kl-reverse, kl-skewed(λ), sorted-logit-pad
        #[arg(long)]
        method: Option<String>,
    },
    /// Exact-match accuracy of greedy generation on one split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file, or a stage name inside the run directory.
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long, default_value = "held-out")]
        split: String,
        #[arg(long, value_enum, default_value_t = Which::Student)]
        model: Which,
        /// Read the checkpoint from this comparator's directory.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Cosine-alignment matrix per checkpoint, plus centroid drift across them.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true)]
        ckpt: Vec<String>,
        /// Pool over answer rows only.
        #[arg(long)]
        answer_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out CE curves from a metrics stream, as CSV and SVG.
    Plot {
        #[arg(long, required_unless_present = "metrics")]
        config: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Student,
    Teacher,
}

fn prepare(config: &Path) -> Result<Prepared> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    Ok(Prepared::new(cfg)?)
}

fn existing_teacher(prep: &Prepared) -> Result<recal_core::model::ModelWeights> {
    let path = prep
        .config
        .teacher_checkpoint
        .clone()
        .unwrap_or_else(|| prep.config.run_dir().join(TEACHER_CKPT));
    if !path.exists() {
        bail!("no teacher checkpoint at {}; run pretrain-teacher first", path.display());
    }
    Ok(load_teacher(prep, &path)?)
}

fn resolve_ckpt(dir: &Path, name: &str) -> PathBuf {
    let p = PathBuf::from(name);
    if p.extension().is_some_and(|e| e == "ckpt") || p.is_file() {
        p
    } else {
        checkpoint_path(dir, name)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let prep = prepare(&config)?;
            let dir = out.unwrap_or_else(|| prep.config.run_dir().join("data"));
            for p in write_corpus(&dir, &prep.corpus)? {
                println!("{}", p.display());
            }
        }
        Command::PretrainTeacher { config } => {
            let prep = prepare(&config)?;
            let (path, acc) = pretrain_into(&prep, &prep.config.run_dir())?;
            println!("accuracy={acc} n={}", prep.corpus.held_out.len());
            println!("{}", path.display());
        }
        Command::Train { config, stage } => {
            let prep = prepare(&config)?;
            let select: StageSelect = stage.parse()?;
            let teacher = obtain_teacher(&prep)?;
            let out = run_training(&prep, teacher, distiller("recal")?.as_ref(), select, &prep.config.run_dir())?;
            for c in &out.checkpoints {
                println!("{}", c.display());
            }
            println!("{}", out.metrics.display());
        }
        Command::Baseline { config, method } => {
            let prep = prepare(&config)?;
            let name = method.unwrap_or_else(|| prep.config.distiller.clone());
            let method = distiller(&name)?;
            // Check compatibility before paying for teacher pretraining.
            method.check_compatible(&prep.tok_l, &prep.tok_s)?;
            let teacher = obtain_teacher(&prep)?;
            let dir = baseline_dir(&prep.config, &method.name());
            let out = run_training(&prep, teacher, method.as_ref(), StageSelect::All, &dir)?;
            for c in &out.checkpoints {
                println!("{}", c.display());
            }
            println!("{}", out.metrics.display());
        }
        Command::Eval {
            config,
            ckpt,
            split,
            model,
            baseline,
        } => {
            let prep = prepare(&config)?;
            let split: Split = split.parse()?;
            let pairs = prep.corpus.split(split);
            let max_new = prep.config.eval.max_new;
            let acc = match model {
                Which::Teacher => eval_accuracy(&existing_teacher(&prep)?, &prep.tok_l, pairs, max_new)?,
                Which::Student => {
                    let ckpt = ckpt.context("--ckpt is required for the student")?;
                    let dir = match &baseline {
                        Some(m) => baseline_dir(&prep.config, &distiller(m)?.name()),
                        None => prep.config.run_dir(),
                    };
                    let models = models_from_checkpoint(&prep, &resolve_ckpt(&dir, &ckpt), None)?;
                    eval_accuracy(&models.student, &prep.tok_s, pairs, max_new)?
                }
            };
            println!("accuracy={acc} n={}", pairs.len());
        }
        Command::Diagnose {
            config,
            ckpt,
            answer_only,
            out,
        } => {
            let prep = prepare(&config)?;
            let run_dir = prep.config.run_dir();
            let out = out.unwrap_or_else(|| run_dir.clone());
            let teacher = existing_teacher(&prep)?;
            let probe = prep.encode(prep.probe_pairs())?;
            let mut loaded = Vec::new();
            for name in &ckpt {
                let path = resolve_ckpt(&run_dir, name);
                let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or(name).to_string();
                let models = models_from_checkpoint(&prep, &path, Some(teacher.clone()))?;
                let m = cosine_alignment(&models, &probe, answer_only, &label)?;
                let diag = format!("alignment-{label}");
                let files = write_artifacts(
                    &out,
                    &prep.config.run_id,
                    &diag,
                    &alignment_csv(&m),
                    Some(&heatmap_svg(&diag, &m.values)),
                )?;
                println!("{label} diagonal_dominance={} n={}", diagonal_dominance(&m), m.n_pairs);
                for f in files {
                    println!("{}", f.display());
                }
                loaded.push((label, models));
            }
            if loaded.len() >= 2 {
                let rows = centroid_drift(&loaded, &probe)?;
                for f in write_artifacts(&out, &prep.config.run_id, "drift", &drift_csv(&rows), None)? {
                    println!("{}", f.display());
                }
            }
        }
        Command::Plot {
            config,
            metrics,
            run_id,
            out,
        } => {
            let (metrics, default_id, default_out) = match (&metrics, &config) {
                (Some(m), _) => {
                    let parent = m.parent().map(Path::to_path_buf).unwrap_or_default();
                    let id = parent.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string();
                    (m.clone(), id, parent)
                }
                (None, Some(c)) => {
                    let cfg = ExperimentConfig::load(c)?;
                    let dir = cfg.run_dir();
                    (dir.join(METRICS_FILE), cfg.run_id, dir)
                }
                (None, None) => bail!("either --config or --metrics is required"),
            };
            let run_id = run_id.unwrap_or(default_id);
            let points = perplexity_series(&read_jsonl(&metrics)?)?;
            let files = write_artifacts(
                &out.unwrap_or(default_out),
                &run_id,
                "perplexity",
                &perplexity_csv(&points),
                Some(&perplexity_svg(&run_id, &points)),
            )?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
