//! Training loop: AdamW under a warmup/cosine schedule, periodic
//! evaluation, CSV metrics and resumable checkpoints.

pub mod data;
pub mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, Real};
use crate::transformer::{Ctx, Head, Mode, Transformer};

use data::{Batch, Task};
use optim::{adamw_step, clip_grad_norm, OptimizerState, StepOutcome};

pub const METRICS_HEADER: &str = "step,epoch,lr,train_loss,val_metric,step_ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.ini";

const OPTIM_M: &str = "optim/m/";
const OPTIM_V: &str = "optim/v/";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.bin")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    /// Mean cross-entropy per prediction, in nats.
    pub loss: f64,
    /// Accuracy for classification, perplexity for language modeling.
    pub metric: f64,
}

/// Eval-mode loss and metric over the task's validation set.
pub fn evaluate<T: Real>(model: &Transformer<T>, task: &Task) -> Result<EvalResult> {
    let (mut loss_sum, mut count, mut correct) = (0.0, 0usize, 0usize);
    for Batch { tokens, targets } in task.val_batches() {
        let mut ctx = Ctx::new(&model.store, Mode::Eval);
        let (logits, loss) = model.loss(&mut ctx, &tokens, &targets)?;
        loss_sum += ctx.graph.value(loss).item().as_f64() * targets.len() as f64;
        count += targets.len();
        if let Head::Classifier { classes } = model.spec.head {
            let values = ctx.graph.value(logits).data();
            for (row, &y) in values.chunks(classes).zip(&targets) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
                correct += usize::from(best == y);
            }
        }
    }
    let loss = loss_sum / count as f64;
    let metric = match model.spec.head {
        Head::Classifier { .. } => correct as f64 / count as f64,
        Head::LanguageModel => loss.exp(),
    };
    Ok(EvalResult { loss, metric })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub outcome: StepOutcome,
    pub millis: f64,
}

#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub config: RunConfig,
    pub model: Transformer<T>,
    pub task: Task,
    pub opt: OptimizerState<T>,
    /// Updates applied so far.
    pub step: u64,
    metrics: String,
    /// Loss sum, update count and milliseconds since the last metrics row.
    window: [f64; 3],
    timings: String,
}

fn check_dtype<T: Real>(config: &RunConfig) -> Result<()> {
    if config.train.dtype != T::DTYPE {
        return Err(Error::invalid(
            "trainer",
            format!("configured dtype {} but running at {}", config.train.dtype, T::DTYPE),
        ));
    }
    Ok(())
}

/// Rebuilds the model stored in a checkpoint written by [`Trainer`] or by
/// export.
pub fn load_model<T: Real>(ck: &Checkpoint) -> Result<(RunConfig, Transformer<T>)> {
    let config = RunConfig::parse(&ck.meta_str("config")?)?;
    check_dtype::<T>(&config)?;
    let mut model = Transformer::<T>::new(config.model.clone())?;
    model.freeze_fusion_weights(config.train.freeze_fusion_weights);
    let named = ck
        .tensors
        .iter()
        .filter(|r| !r.name.starts_with("optim/"))
        .map(|r| Ok((r.name.clone(), r.to_tensor::<T>()?)))
        .collect::<Result<Vec<_>>>()?;
    model.load_named(named)?;
    Ok((config, model))
}

/// Precision recorded in a checkpoint's configuration.
pub fn checkpoint_dtype(ck: &Checkpoint) -> Result<DType> {
    Ok(RunConfig::parse(&ck.meta_str("config")?)?.train.dtype)
}

/// A checkpoint holding only model values and configuration.
pub fn model_checkpoint<T: Real>(config: &RunConfig, model: &Transformer<T>, step: u64) -> Checkpoint {
    let mut ck = Checkpoint::default();
    for e in model.store.entries() {
        ck.push_tensor(e.name.clone(), &e.value);
    }
    ck.set_meta_str("config", &config.to_ini());
    ck.set_meta_u64("step", step);
    ck.set_meta_str("variant", model.spec.ffn_variant.name());
    ck.set_meta_f64s("momentum", &[model.spec.momentum]);
    ck.set_meta_u64("seed", config.train.seed);
    ck.set_meta_str("dtype", T::DTYPE.name());
    ck
}

impl<T: Real> Trainer<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        check_dtype::<T>(&config)?;
        let mut model = Transformer::<T>::new(config.model.clone())?;
        model.freeze_fusion_weights(config.train.freeze_fusion_weights);
        let task = Task::build(&config.task, config.model.vocab_size)?;
        let opt = OptimizerState::new(&model.store);
        Ok(Self {
            config,
            model,
            task,
            opt,
            step: 0,
            metrics: format!("{METRICS_HEADER}\n"),
            window: [0.0; 3],
            timings: String::from("step,step_ms\n"),
        })
    }

    /// Restores the full training state, including optimizer moments,
    /// memory banks and the metrics written so far.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let (config, model) = load_model::<T>(ck)?;
        let mut t = Self::new(config)?;
        t.model = model;
        t.step = ck.meta_u64("step")?;
        if t.step > t.config.train.total_steps {
            return Err(Error::invalid("resume", "checkpoint is past total_steps"));
        }
        t.opt.step = ck.meta_u64("optim_step")?;
        let ids: Vec<_> = t.model.store.ids().filter(|&id| t.model.store.entry(id).trainable()).collect();
        for id in ids {
            let name = &t.model.store.entry(id).name;
            let fetch = |prefix: &str| {
                ck.tensor(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::invalid("resume", format!("missing optimizer state for `{name}`")))?
                    .to_tensor::<T>()
            };
            let (m, v) = (fetch(OPTIM_M)?, fetch(OPTIM_V)?);
            if m.shape() != t.model.store.value(id).shape() || v.shape() != m.shape() {
                return Err(Error::shape("resume", t.model.store.value(id).shape(), m.shape()));
            }
            t.opt.m[id.index()] = m;
            t.opt.v[id.index()] = v;
        }
        t.metrics = ck.meta_str("metrics")?;
        let w = ck.meta_f64s("window")?;
        t.window = w
            .try_into()
            .map_err(|_| Error::invalid("resume", "malformed metrics window"))?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = model_checkpoint(&self.config, &self.model, self.step);
        for (id, e) in self.model.store.ids().zip(self.model.store.entries()) {
            if e.trainable() {
                ck.push_tensor(format!("{OPTIM_M}{}", e.name), &self.opt.m[id.index()]);
                ck.push_tensor(format!("{OPTIM_V}{}", e.name), &self.opt.v[id.index()]);
            }
        }
        ck.set_meta_u64("optim_step", self.opt.step);
        ck.set_meta_str("metrics", &self.metrics);
        ck.set_meta_f64s("window", &self.window);
        ck
    }

    pub fn metrics_csv(&self) -> &str {
        &self.metrics
    }

    pub fn timings_csv(&self) -> &str {
        &self.timings
    }

    /// Training-mode loss on the batch of the next update, leaving every
    /// piece of state untouched.
    pub fn probe_loss(&self) -> Result<f64> {
        let batch = self.task.train_batch(self.step);
        let mut ctx = Ctx::new(&self.model.store, Mode::Train);
        let (_, loss) = self.model.loss(&mut ctx, &batch.tokens, &batch.targets)?;
        Ok(ctx.graph.value(loss).item().as_f64())
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let next = self.step + 1;
        let lr = self.config.train.schedule().lr_at(next)?;
        let batch = self.task.train_batch(self.step);
        let start = Instant::now();
        let mut ctx = Ctx::new(&self.model.store, Mode::Train);
        let (_, loss) = self.model.loss(&mut ctx, &batch.tokens, &batch.targets)?;
        let loss_value = ctx.graph.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {next}")));
        }
        ctx.backward(loss)?;
        let mut grads = ctx.param_grads();
        let banks = ctx.take_bank_updates();
        drop(ctx);
        let grad_norm = match self.config.train.grad_clip {
            Some(c) => clip_grad_norm(&self.model.store, &mut grads, c),
            None => optim::grad_norm(&self.model.store, &grads),
        };
        let outcome = adamw_step(&mut self.model.store, &grads, &mut self.opt, &self.config.train.adamw, lr)?;
        match outcome {
            StepOutcome::Applied => self.model.apply_bank_updates(banks)?,
            StepOutcome::SkippedNonFinite => log::warn!("step {next}: non-finite gradient, update skipped"),
        }
        self.step = next;
        Ok(StepReport {
            step: next,
            loss: loss_value,
            lr,
            grad_norm,
            outcome,
            millis: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn push_row(&mut self, lr: f64, train_loss: f64, ms: f64) -> Result<EvalResult> {
        let eval = evaluate(&self.model, &self.task)?;
        let epoch = self.task.epoch_of(self.step.saturating_sub(1));
        let ms = if self.config.train.deterministic { 0.0 } else { ms };
        let _ = writeln!(
            self.metrics,
            "{},{},{:.6e},{:.6},{:.6},{:.3}",
            self.step, epoch, lr, train_loss, eval.metric, ms
        );
        log::info!(
            "step {} lr {:.3e} loss {:.4} val {:.4}",
            self.step,
            lr,
            train_loss,
            eval.metric
        );
        Ok(eval)
    }

    fn write_outputs(&self, dir: &Path, checkpoint: bool) -> Result<()> {
        let write = |name: &str, text: &str| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        write(METRICS_FILE, &self.metrics)?;
        write(TIMING_FILE, &self.timings)?;
        if checkpoint {
            self.checkpoint().save(&dir.join(checkpoint_name(self.step)))?;
        }
        Ok(())
    }

    /// Trains until `total_steps`, logging a metrics row at step 0 and every
    /// `log_interval` updates (plus the last), and checkpointing at step 0,
    /// every `ckpt_interval` updates and at the end. With `out` unset
    /// nothing is written to disk.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Option<EvalResult>> {
        let total = self.config.train.total_steps;
        let log_every = self.config.train.log_interval;
        let ckpt_every = self.config.train.ckpt_interval;
        if let Some(dir) = out {
            std::fs::write(dir.join(RESOLVED_CONFIG_FILE), self.config.to_ini())
                .map_err(|e| Error::io(dir.join(RESOLVED_CONFIG_FILE), e))?;
        }
        let mut last = None;
        if self.step == 0 {
            if total > 0 {
                let loss = self.probe_loss()?;
                last = Some(self.push_row(0.0, loss, 0.0)?);
            }
            if let Some(dir) = out {
                self.write_outputs(dir, true)?;
            }
        }
        while self.step < total {
            let r = self.train_step()?;
            let _ = writeln!(self.timings, "{},{:.3}", r.step, r.millis);
            self.window[0] += r.loss;
            self.window[1] += 1.0;
            self.window[2] += r.millis;
            let row = r.step % log_every == 0 || r.step == total;
            if row {
                let [sum, n, ms] = self.window;
                last = Some(self.push_row(r.lr, sum / n, ms / n)?);
                self.window = [0.0; 3];
            }
            let ckpt = r.step == total || (ckpt_every > 0 && r.step % ckpt_every == 0);
            if let Some(dir) = out {
                if row || ckpt {
                    self.write_outputs(dir, ckpt)?;
                }
            }
        }
        Ok(last)
    }
}

/// Fails when `dir` exists with contents, unless `force`; then creates it.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<PathBuf> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Usage(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}
