//! Command-line driver.
//!
//! Configuration precedence, lowest to highest: built-in desk defaults, the
//! `--config` TOML file, then individual flags.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::alignment::Tokenizer;
use crate::checkpoint::Checkpoint;
use crate::corpus::{
    base_dir, corpus_stats, generate_synthetic, load_records, resolve_images, save_records, Level,
    SyntheticCorpusSpec, TaxonomyRecord,
};
use crate::error::{at_path, Error, Result};
use crate::evaluation::{class_descriptions, labels_at, probe_model, zero_shot, ProbeConfig};
use crate::gradcheck::check_losses;
use crate::params::ModelParams;
use crate::training::{
    load_model, stream_rng, MetricsLog, TrainConfig, Trainer, TrainingData, STREAM_INIT,
};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "insect-fm", version, about = "Desk-scale patch-pool pretraining and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for every random choice; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is bit-reproducible.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// TOML configuration file: corpus spec for gen-corpus, training config
    /// for pretrain, gradcheck and --random-init.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic taxonomy corpus as JSON lines with inline images.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Number of species [default: 8, or the config value].
        #[arg(long)]
        classes: Option<usize>,
        /// Images per species [default: 64, or the config value].
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-level class counts of a corpus.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train from scratch, or resume from a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory: config.toml, metrics.jsonl, step-N checkpoints and `final`.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total optimization steps (overrides schedule.steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Base learning rate (overrides optim.lr).
        #[arg(long)]
        lr: Option<f64>,
        /// Batch size (overrides schedule.batch_size).
        #[arg(long)]
        batch_size: Option<usize>,
        /// Train with the relevance loss alone.
        #[arg(long)]
        relevance_only: bool,
        /// Log to stderr every this many steps; 0 disables.
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Compare analytic gradients with finite differences on random small instances.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Entries sampled per parameter tensor.
        #[arg(long, default_value_t = 8)]
        per_tensor: usize,
    },
    /// Linear probe on frozen pooled features.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = Level::Species)]
        level: Level,
        /// Probe optimization steps.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Probe learning rate (constant).
        #[arg(long, default_value_t = 1e-3)]
        probe_lr: f64,
        /// Also write the result JSON here.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Zero-shot classification by description similarity.
    Zeroshot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = Level::Species)]
        level: Level,
        /// Give every class the same description (control).
        #[arg(long)]
        identical_descriptions: bool,
        /// Also write the result JSON here.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Summarize a checkpoint.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ModelSource {
    /// Checkpoint file, or a pretrain output directory (uses its `final`).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Freshly initialized encoder from --config and --seed (baseline).
    #[arg(long)]
    pub random_init: bool,
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `out`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            match e {
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

/// One-line JSON error report.
pub fn error_line(e: &Error) -> String {
    let kind = match e {
        Error::Parse { .. } => "parse",
        Error::Hierarchy(_) => "hierarchy",
        Error::Shape(_) => "shape",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Vocab(_) => "vocab",
        Error::NonFinite(_) => "non_finite",
        Error::Divergence { .. } => "divergence",
        Error::Checkpoint(_) => "checkpoint",
        Error::Config(_) => "config",
        Error::Evaluation(_) => "evaluation",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    };
    json!({"error": kind, "message": e.to_string()}).to_string()
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenCorpus {
            common,
            classes,
            per_class,
            out: path,
        } => {
            set_threads(common.threads)?;
            let mut spec = match &common.config {
                Some(p) => toml::from_str::<SyntheticCorpusSpec>(&fs::read_to_string(p).map_err(at_path(p))?)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => SyntheticCorpusSpec::desk(8, 64, 0),
            };
            if let Some(c) = classes {
                if common.config.is_some() && c != spec.num_classes {
                    return Err(Error::invalid("--classes differs from the config; edit its vocab instead"));
                }
                spec = SyntheticCorpusSpec::desk(c, spec.samples_per_class, spec.seed);
            }
            if let Some(n) = per_class {
                spec.samples_per_class = n;
            }
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let records = generate_synthetic(&spec)?;
            save_records(&records, &path)?;
            emit(out, &json!({"records": records.len(), "classes": spec.num_classes, "seed": spec.seed, "out": path}))
        }
        Command::Stats { common, corpus } => {
            set_threads(common.threads)?;
            let records = load_records(&corpus)?;
            let stats = corpus_stats(&records)?;
            let per_level: serde_json::Map<String, Value> = stats
                .iter()
                .map(|(level, counts)| (level.name().to_string(), json!({"classes": counts.len(), "counts": counts})))
                .collect();
            emit(out, &json!({"records": records.len(), "levels": per_level}))
        }
        Command::Pretrain {
            common,
            corpus,
            out: dir,
            resume,
            steps,
            lr,
            batch_size,
            relevance_only,
            log_every,
        } => pretrain(common, &corpus, &dir, resume.as_deref(), steps, lr, batch_size, relevance_only, log_every, out),
        Command::Gradcheck { common, per_tensor } => {
            set_threads(common.threads)?;
            let mut config = match &common.config {
                Some(p) => TrainConfig::load(p)?,
                None => crate::gradcheck::small_config(),
            };
            if let Some(s) = common.seed {
                config.seed = s;
            }
            let reports = check_losses(&config, config.seed, per_tensor)?;
            let max = reports.values().map(|r| r.max_rel_error).fold(0.0, f64::max);
            let pass = max < GRADCHECK_TOLERANCE;
            emit(out, &json!({"max_rel_error": max, "tolerance": GRADCHECK_TOLERANCE, "pass": pass, "losses": reports}))?;
            if pass {
                Ok(())
            } else {
                Err(Error::Evaluation(format!("max relative error {max:e} >= {GRADCHECK_TOLERANCE:e}")))
            }
        }
        Command::Probe {
            common,
            model,
            corpus,
            level,
            steps,
            probe_lr,
            results,
        } => {
            set_threads(common.threads)?;
            let mut probe = ProbeConfig {
                level,
                steps,
                lr: probe_lr,
                ..ProbeConfig::default()
            };
            if let Some(s) = common.seed {
                probe.seed = s;
            }
            let records = load_records(&corpus)?;
            let (config, tokenizer, params) = resolve_model(&model, &common, &records)?;
            let data = prepare(&corpus, &records, &tokenizer, &config)?;
            let labels = labels_at(&records, probe.level);
            let result = probe_model(&params, &config.model, &data, &labels, &probe)?;
            let value = serde_json::to_value(&result)?;
            write_results(results.as_deref(), &value)?;
            emit(out, &value)
        }
        Command::Zeroshot {
            common,
            model,
            corpus,
            level,
            identical_descriptions,
            results,
        } => {
            set_threads(common.threads)?;
            let records = load_records(&corpus)?;
            let (config, tokenizer, params) = resolve_model(&model, &common, &records)?;
            let data = prepare(&corpus, &records, &tokenizer, &config)?;
            let labels = labels_at(&records, level);
            let mut descriptions = class_descriptions(&records, level, &tokenizer)?;
            if identical_descriptions {
                let first = descriptions.values().next().cloned().unwrap_or_default();
                descriptions.values_mut().for_each(|d| *d = first.clone());
            }
            let result = zero_shot(&params, &config.model, &data, &labels, &descriptions, level)?;
            let mut value = serde_json::to_value(&result)?;
            value["identical_descriptions"] = json!(identical_descriptions);
            write_results(results.as_deref(), &value)?;
            emit(out, &value)
        }
        Command::Inspect { common, ckpt } => {
            set_threads(common.threads)?;
            let file = if ckpt.is_dir() { ckpt.join("final") } else { ckpt };
            let ck = Checkpoint::load(&file)?;
            let tensors: serde_json::Map<String, Value> = ck
                .tensors
                .iter()
                .map(|(k, m)| (k.clone(), json!([m.rows(), m.cols()])))
                .collect();
            let scalars: usize = ck.tensors.iter().filter(|(k, _)| k.starts_with("param/")).map(|(_, m)| m.len()).sum();
            let h = &ck.header;
            emit(
                out,
                &json!({
                    "format": h["format"],
                    "step": h["step"],
                    "total_steps": h["total_steps"],
                    "vocab_size": h["vocab"].as_array().map(Vec::len),
                    "pool_entries": h["pool"]["sources"].as_array().map(Vec::len),
                    "parameters": scalars,
                    "config": h["config"],
                    "tensors": tensors,
                }),
            )
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pretrain(
    common: Common,
    corpus: &Path,
    dir: &Path,
    resume: Option<&Path>,
    steps: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    relevance_only: bool,
    log_every: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => {
            if common.config.is_some() || steps.is_some() || lr.is_some() || batch_size.is_some() || relevance_only {
                return Err(Error::invalid("--resume takes its configuration from the checkpoint"));
            }
            let ck = Checkpoint::load(p)?;
            Some(Trainer::from_checkpoint(&ck)?)
        }
        None => None,
    };
    let config = match &trainer {
        Some(t) => t.config.clone(),
        None => {
            let mut c = match &common.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::desk(),
            };
            if let Some(s) = common.seed {
                c.seed = s;
            }
            if let Some(s) = steps {
                c.schedule.steps = s;
            }
            if let Some(v) = lr {
                c.optim.lr = v;
            }
            if let Some(b) = batch_size {
                c.schedule.batch_size = b;
            }
            if relevance_only {
                c.loss = crate::training::LossConfig::relevance_only();
            }
            c.run.threads = common.threads;
            c.validate()?;
            c
        }
    };
    set_threads(common.threads)?;
    let records = load_records(corpus)?;
    let tokenizer = match &trainer {
        Some(t) => t.tokenizer.clone(),
        None => Tokenizer::from_records(&records, config.model.max_text_len)?,
    };
    let images = resolve_images(&records, &base_dir(corpus))?;
    let data = TrainingData::new(&records, &images, &tokenizer, &config.model)?;
    let mut trainer = match trainer.take() {
        Some(t) => t,
        None => Trainer::new(config.clone(), tokenizer, data.len())?,
    };

    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), config.to_toml()?)?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut log = if resume.is_some() && metrics_path.exists() {
        let mut old = MetricsLog::load(&metrics_path)?;
        old.truncate_to(trainer.step());
        old
    } else {
        MetricsLog::new()
    };
    let every = config.run.checkpoint_every;
    let total = trainer.total_steps();
    let outcome = trainer.run(&data, total, &mut log, |t, rec| {
        if log_every > 0 && (rec.step + 1) % log_every == 0 {
            eprintln!(
                "step {}/{} lr {:.3e} loss {:.4} (rel {:.4} con {:.4} desc {})",
                rec.step + 1,
                total,
                rec.lr,
                rec.loss.total,
                rec.loss.relevance.unwrap_or(f64::NAN),
                rec.loss.contrastive.unwrap_or(f64::NAN),
                rec.loss.description.map_or("-".into(), |d| format!("{d:.4}")),
            );
        }
        if every > 0 && t.step() % every == 0 && t.step() < total {
            t.to_checkpoint()?.save(&dir.join(format!("step-{}", t.step())))?;
        }
        Ok(())
    });
    log.write_jsonl(fs::File::create(&metrics_path)?)?;
    outcome?;
    trainer.to_checkpoint()?.save(&dir.join("final"))?;
    let ends = log.smoothed_ends((log.len() / 10).clamp(1, 50));
    emit(
        out,
        &json!({
            "steps": trainer.step(),
            "final": dir.join("final"),
            "metrics": metrics_path,
            "loss_start": ends.map(|e| e.0),
            "loss_end": ends.map(|e| e.1),
        }),
    )
}

fn resolve_model(
    source: &ModelSource,
    common: &Common,
    records: &[TaxonomyRecord],
) -> Result<(TrainConfig, Tokenizer, ModelParams)> {
    if let Some(p) = &source.ckpt {
        if common.config.is_some() {
            return Err(Error::invalid("--config applies to --random-init only"));
        }
        return load_model(p);
    }
    let mut config = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    let tokenizer = Tokenizer::from_records(records, config.model.max_text_len)?;
    let mut rng = stream_rng(config.seed, STREAM_INIT, 0);
    let params = ModelParams::init(&config.model, tokenizer.len(), &mut rng)?;
    Ok((config, tokenizer, params))
}

fn prepare(corpus: &Path, records: &[TaxonomyRecord], tokenizer: &Tokenizer, config: &TrainConfig) -> Result<TrainingData> {
    let images = resolve_images(records, &base_dir(corpus))?;
    TrainingData::new(records, &images, tokenizer, &config.model)
}

fn write_results(path: Option<&Path>, value: &Value) -> Result<()> {
    if let Some(p) = path {
        if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d)?;
        }
        fs::write(p, serde_json::to_string_pretty(value)? + "\n")?;
    }
    Ok(())
}

fn emit(out: &mut dyn Write, value: &Value) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("--threads must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
