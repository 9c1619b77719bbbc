//! `exfusion` command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{bench, format_table};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::exfusion::collapse_to_dense;
use crate::tensor::{DType, Real};
use crate::testing::random_batch;
use crate::train::data::Task;
use crate::train::{
    checkpoint_dtype, evaluate, load_model, model_checkpoint, prepare_out_dir, EvalResult, Trainer,
};
use crate::transformer::{FfnVariant, Head};
use crate::verify::{self, Suite};

#[derive(Debug, Parser)]
#[command(name = "exfusion", version, about = "Train, export and verify ExFusion Transformers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Override `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Deterministic mode: step times are not written to metrics.csv.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Override `train.dtype`.
    #[arg(long, global = true, value_parser = parse_dtype)]
    pub dtype: Option<DType>,
}

fn parse_dtype(s: &str) -> std::result::Result<DType, String> {
    DType::parse(s).ok_or_else(|| format!("expected f32 or f64, got `{s}`"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics.csv, checkpoints and the resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory [default: runs/<variant>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Allow a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Continue from a training checkpoint.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Collapse an ExFusion checkpoint into a dense one.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run property suites; exits with 3 if any check fails.
    Verify {
        #[arg(default_value = "all", value_parser = parse_suite)]
        suite: Suite,
    },
    /// Compare training step times of every FFN variant.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 30)]
        steps: usize,
    },
    /// Validation metric of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Config whose `[task]` section replaces the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    Suite::parse(s).ok_or_else(|| format!("unknown suite `{s}`"))
}

/// Parses `path` (or the defaults) and applies command-line overrides.
pub fn load_config(path: Option<&Path>, global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.train.seed = seed;
    }
    if let Some(dtype) = global.dtype {
        cfg.train.dtype = dtype;
    }
    cfg.train.deterministic |= global.deterministic;
    cfg.resolve(true)?;
    Ok(cfg)
}

fn report(result: Option<EvalResult>, head: Head) {
    if let Some(r) = result {
        let metric = match head {
            Head::Classifier { .. } => "accuracy",
            Head::LanguageModel => "perplexity",
        };
        println!("val_loss={:.6} {metric}={:.6}", r.loss, r.metric);
    }
}

fn train_with<T: Real>(cfg: Option<RunConfig>, resume: Option<&Checkpoint>, out: &Path) -> Result<()> {
    let mut trainer = match (cfg, resume) {
        (_, Some(ck)) => Trainer::<T>::resume(ck)?,
        (Some(cfg), None) => Trainer::<T>::new(cfg)?,
        (None, None) => unreachable!("caller passes one of them"),
    };
    log::info!(
        "{} params, {} buffers, variant {}",
        trainer.model.store.parameter_count(),
        trainer.model.store.buffer_count(),
        trainer.model.spec.ffn_variant.name()
    );
    let result = trainer.run(Some(out))?;
    report(result, trainer.model.spec.head);
    Ok(())
}

pub fn cmd_train(
    global: &GlobalArgs,
    config: Option<&Path>,
    out: Option<&Path>,
    force: bool,
    resume: Option<&Path>,
) -> Result<()> {
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        let dir = out.map(Path::to_path_buf).unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        return match checkpoint_dtype(&ck)? {
            DType::F32 => train_with::<f32>(None, Some(&ck), &dir),
            DType::F64 => train_with::<f64>(None, Some(&ck), &dir),
        };
    }
    let cfg = load_config(config, global)?;
    let default_dir = PathBuf::from("runs").join(cfg.model.ffn_variant.name());
    let dir = prepare_out_dir(out.unwrap_or(&default_dir), force)?;
    match cfg.train.dtype {
        DType::F32 => train_with::<f32>(Some(cfg), None, &dir),
        DType::F64 => train_with::<f64>(Some(cfg), None, &dir),
    }
}

/// What `export` did, for callers that want more than the printed summary.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportSummary {
    pub source_params: usize,
    pub exported_params: usize,
    pub dense_baseline: usize,
    pub max_logit_deviation: f64,
}

fn export_with<T: Real>(ck: &Checkpoint, out: &Path) -> Result<Option<ExportSummary>> {
    let (mut cfg, model) = load_model::<T>(ck)?;
    match model.spec.ffn_variant {
        FfnVariant::Dense => {
            log::warn!("checkpoint is already dense; nothing to export");
            return Ok(None);
        }
        FfnVariant::TopKMoe => {
            return Err(Error::Usage("top-k MoE checkpoints have no parameter-level collapse".into()));
        }
        _ => {}
    }
    let dense = collapse_to_dense(&model)?;
    let probe = random_batch(cfg.train.seed, 4, cfg.task.seq_len, model.spec.vocab_size);
    let deviation = model.logits(&probe)?.max_abs_diff(&dense.logits(&probe)?)?;
    cfg.model = dense.spec.clone();
    cfg.train.freeze_fusion_weights = false;
    model_checkpoint(&cfg, &dense, ck.meta_u64("step")?).save(out)?;
    Ok(Some(ExportSummary {
        source_params: model.store.parameter_count(),
        exported_params: dense.store.parameter_count(),
        dense_baseline: model.spec.dense().param_count(),
        max_logit_deviation: deviation,
    }))
}

pub fn cmd_export(ckpt: &Path, out: &Path) -> Result<Option<ExportSummary>> {
    let ck = Checkpoint::load(ckpt)?;
    let summary = match checkpoint_dtype(&ck)? {
        DType::F32 => export_with::<f32>(&ck, out)?,
        DType::F64 => export_with::<f64>(&ck, out)?,
    };
    if let Some(s) = &summary {
        println!(
            "params source={} exported={} dense_baseline={}",
            s.source_params, s.exported_params, s.dense_baseline
        );
        println!("max_logit_deviation={:.3e}", s.max_logit_deviation);
        println!("wrote {}", out.display());
    }
    Ok(summary)
}

pub fn cmd_verify(suite: Suite) -> Result<()> {
    let checks = verify::run(suite)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("suite={} checks={} failed={failed}", suite.name(), checks.len());
    if failed > 0 {
        return Err(Error::Verification {
            failed,
            total: checks.len(),
        });
    }
    Ok(())
}

pub fn cmd_bench(global: &GlobalArgs, config: Option<&Path>, warmup: usize, steps: usize) -> Result<()> {
    let cfg = load_config(config, global)?;
    let rows = match cfg.train.dtype {
        DType::F32 => bench::<f32>(&cfg, warmup, steps)?,
        DType::F64 => bench::<f64>(&cfg, warmup, steps)?,
    };
    print!("{}", format_table(&rows, cfg.model.num_experts));
    Ok(())
}

fn eval_with<T: Real>(ck: &Checkpoint, task_config: Option<&RunConfig>) -> Result<(EvalResult, Head)> {
    let (mut cfg, model) = load_model::<T>(ck)?;
    if let Some(other) = task_config {
        cfg.task = other.task.clone();
        cfg.resolve(true)?;
        if cfg.model != model.spec {
            return Err(Error::config("task", "does not match the checkpoint's model (head, vocabulary or length)"));
        }
    }
    let task = Task::build(&cfg.task, cfg.model.vocab_size)?;
    Ok((evaluate(&model, &task)?, model.spec.head))
}

pub fn cmd_eval(global: &GlobalArgs, ckpt: &Path, config: Option<&Path>) -> Result<EvalResult> {
    let ck = Checkpoint::load(ckpt)?;
    let task_config = config.map(|p| load_config(Some(p), global)).transpose()?;
    let (result, head) = match checkpoint_dtype(&ck)? {
        DType::F32 => eval_with::<f32>(&ck, task_config.as_ref())?,
        DType::F64 => eval_with::<f64>(&ck, task_config.as_ref())?,
    };
    report(Some(result), head);
    Ok(result)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train {
            config,
            out,
            force,
            resume,
        } => cmd_train(g, config.as_deref(), out.as_deref(), *force, resume.as_deref()),
        Command::Export { ckpt, out } => cmd_export(ckpt, out).map(|_| ()),
        Command::Verify { suite } => cmd_verify(*suite),
        Command::Bench { config, warmup, steps } => cmd_bench(g, config.as_deref(), *warmup, *steps),
        Command::Eval { ckpt, config } => cmd_eval(g, ckpt, config.as_deref()).map(|_| ()),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
