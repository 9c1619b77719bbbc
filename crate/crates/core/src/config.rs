//! INI run configuration: `[model]`, `[train]` and `[task]` sections of
//! `key = value` lines. Unknown sections and keys are rejected, and every
//! value is validated before anything is allocated.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::DType;
use crate::train::data::{corpus_alphabet, TaskKind, TaskSpec};
use crate::train::optim::{AdamW, Schedule};
use crate::transformer::{BankOrder, ExpertInit, FfnVariant, Head, LayerSet, ModelSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub lr: f64,
    pub min_lr: f64,
    pub adamw: AdamW,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub log_interval: u64,
    /// Periodic checkpoint spacing; 0 keeps only the initial and final ones.
    pub ckpt_interval: u64,
    pub freeze_fusion_weights: bool,
    pub seed: u64,
    pub dtype: DType,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 5000,
            warmup_steps: 500,
            lr: 1e-3,
            min_lr: 1e-5,
            adamw: AdamW::default(),
            grad_clip: Some(1.0),
            log_interval: 100,
            ckpt_interval: 1000,
            freeze_fusion_weights: false,
            seed: 0,
            dtype: DType::F32,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            base_lr: self.lr,
            min_lr: self.min_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        let a = &self.adamw;
        for (key, v) in [("beta1", a.beta1), ("beta2", a.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(a.eps.is_finite() && a.eps > 0.0) {
            return Err(Error::config("eps", "must be positive and finite"));
        }
        if !(a.weight_decay.is_finite() && a.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be finite and non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("grad_clip", "must be positive and finite, or 0 to disable"));
            }
        }
        if self.log_interval == 0 {
            return Err(Error::config("log_interval", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            model: ModelSpec::default(),
            task: TaskSpec::default(),
            train: TrainConfig::default(),
        };
        cfg.resolve(false).expect("defaults are valid");
        cfg
    }
}

struct Section<'a> {
    name: &'a str,
    entries: Vec<(&'a str, &'a str)>,
}

fn parse_ini(text: &str) -> Result<Vec<Section<'_>>> {
    let mut sections: Vec<Section<'_>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        let at = || format!("line {}", i + 1);
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::config(at(), "unterminated section header"))?
                .trim();
            if sections.iter().any(|s| s.name == name) {
                return Err(Error::config(name, "section appears twice"));
            }
            sections.push(Section {
                name,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(at(), "expected `key = value`"))?;
        let section = sections
            .last_mut()
            .ok_or_else(|| Error::config(at(), "key outside any section"))?;
        let key = key.trim();
        if section.entries.iter().any(|(k, _)| *k == key) {
            return Err(Error::config(key, "set twice"));
        }
        section.entries.push((key, strip_comment(value).trim()));
    }
    Ok(sections)
}

/// Drops a trailing `; note` or `# note`; the marker must follow whitespace.
fn strip_comment(value: &str) -> &str {
    let cut = value
        .char_indices()
        .zip(value.chars().skip(1))
        .find(|((_, c), next)| c.is_whitespace() && (*next == ';' || *next == '#'))
        .map(|((i, _), _)| i);
    cut.map_or(value, |i| &value[..i])
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn float(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::config(key, "must be finite"))
    }
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
    }
}

fn layer_set(key: &str, v: &str) -> Result<LayerSet> {
    match v {
        "all" => Ok(LayerSet::All),
        "none" | "" => Ok(LayerSet::Only(BTreeSet::new())),
        list => list
            .split(',')
            .map(|s| num::<usize>(key, s.trim()))
            .collect::<Result<BTreeSet<_>>>()
            .map(LayerSet::Only),
    }
}

fn layer_set_str(s: &LayerSet) -> String {
    match s {
        LayerSet::All => "all".into(),
        LayerSet::Only(set) if set.is_empty() => "none".into(),
        LayerSet::Only(set) => set.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
    }
}

fn expert_init_str(i: ExpertInit) -> &'static str {
    match i {
        ExpertInit::Independent => "independent",
        ExpertInit::Replicate => "replicate",
    }
}

fn bank_order_str(o: BankOrder) -> &'static str {
    match o {
        BankOrder::UpdateThenFuse => "update_then_fuse",
        BankOrder::FuseThenUpdate => "fuse_then_update",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self {
            model: ModelSpec::default(),
            task: TaskSpec::default(),
            train: TrainConfig::default(),
        };
        let mut vocab_given = false;
        for section in parse_ini(text)? {
            for (key, v) in section.entries {
                match section.name {
                    "model" => {
                        if key == "vocab_size" {
                            vocab_given = true;
                        }
                        cfg.set_model(key, v)?
                    }
                    "train" => cfg.set_train(key, v)?,
                    "task" => cfg.set_task(key, v)?,
                    other => return Err(Error::config(other, "unknown section")),
                }
            }
        }
        cfg.resolve(vocab_given)?;
        Ok(cfg)
    }

    fn set_model(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "variant" => {
                m.ffn_variant = FfnVariant::parse(v).ok_or_else(|| {
                    Error::config(key, format!("unknown variant `{v}`"))
                })?
            }
            "depth" => m.depth = num(key, v)?,
            "dim" => m.dim = num(key, v)?,
            "heads" => m.heads = num(key, v)?,
            "expansion" => m.expansion = num(key, v)?,
            "vocab_size" => m.vocab_size = num(key, v)?,
            "max_seq_len" => m.max_seq_len = num(key, v)?,
            "num_experts" => m.num_experts = num(key, v)?,
            "top_k" => m.top_k = num(key, v)?,
            "momentum" => m.momentum = float(key, v)?,
            "replaced_layers" => m.replaced_layers = layer_set(key, v)?,
            "shared_router" => m.shared_router = boolean(key, v)?,
            "init" => {
                m.expert_init = match v {
                    "independent" => ExpertInit::Independent,
                    "replicate" => ExpertInit::Replicate,
                    _ => return Err(Error::config(key, format!("expected independent or replicate, got `{v}`"))),
                }
            }
            "bank_order" => {
                m.bank_order = match v {
                    "update_then_fuse" => BankOrder::UpdateThenFuse,
                    "fuse_then_update" => BankOrder::FuseThenUpdate,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected update_then_fuse or fuse_then_update, got `{v}`"),
                        ))
                    }
                }
            }
            "init_std" => m.init_std = float(key, v)?,
            _ => return Err(Error::config(format!("model.{key}"), "unknown key")),
        }
        Ok(())
    }

    fn set_train(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "total_steps" => t.total_steps = num(key, v)?,
            "warmup_steps" => t.warmup_steps = num(key, v)?,
            "lr" => t.lr = float(key, v)?,
            "min_lr" => t.min_lr = float(key, v)?,
            "weight_decay" => t.adamw.weight_decay = float(key, v)?,
            "beta1" => t.adamw.beta1 = float(key, v)?,
            "beta2" => t.adamw.beta2 = float(key, v)?,
            "eps" => t.adamw.eps = float(key, v)?,
            "grad_clip" => {
                let c = float(key, v)?;
                t.grad_clip = if c == 0.0 { None } else { Some(c) };
            }
            "log_interval" => t.log_interval = num(key, v)?,
            "ckpt_interval" => t.ckpt_interval = num(key, v)?,
            "freeze_fusion_weights" => t.freeze_fusion_weights = boolean(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "dtype" => t.dtype = DType::parse(v).ok_or_else(|| Error::config(key, format!("expected f32 or f64, got `{v}`")))?,
            "deterministic" => t.deterministic = boolean(key, v)?,
            _ => return Err(Error::config(format!("train.{key}"), "unknown key")),
        }
        Ok(())
    }

    fn set_task(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.task;
        match key {
            "kind" => t.kind = TaskKind::parse(v).ok_or_else(|| Error::config(key, format!("unknown task `{v}`")))?,
            "seq_len" => t.seq_len = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "num_classes" => t.num_classes = num(key, v)?,
            "train_size" => t.train_size = num(key, v)?,
            "val_size" => t.val_size = num(key, v)?,
            "noise" => t.noise = float(key, v)?,
            "val_fraction" => t.val_fraction = float(key, v)?,
            "val_windows" => t.val_windows = num(key, v)?,
            _ => return Err(Error::config(format!("task.{key}"), "unknown key")),
        }
        Ok(())
    }

    /// Derives the dependent fields (seeds, head, corpus vocabulary) and
    /// validates the whole configuration.
    pub fn resolve(&mut self, vocab_given: bool) -> Result<()> {
        self.model.seed = self.train.seed;
        self.task.seed = self.train.seed;
        match self.task.kind {
            TaskKind::SyntheticCluster => {
                self.model.head = Head::Classifier {
                    classes: self.task.num_classes,
                }
            }
            TaskKind::CharLm => {
                let v = corpus_alphabet().len();
                if vocab_given && self.model.vocab_size != v {
                    return Err(Error::config(
                        "vocab_size",
                        format!("char_lm fixes the vocabulary at {v} characters"),
                    ));
                }
                self.model.vocab_size = v;
                self.model.head = Head::LanguageModel;
            }
        }
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        if self.task.seq_len > self.model.max_seq_len {
            return Err(Error::config(
                "seq_len",
                format!("exceeds max_seq_len {}", self.model.max_seq_len),
            ));
        }
        if self.train.freeze_fusion_weights && self.model.ffn_variant != FfnVariant::ExFusionDw {
            return Err(Error::config("freeze_fusion_weights", "only applies to exfusion_dw"));
        }
        Ok(())
    }

    /// Fully resolved configuration; parsing it yields `self` again.
    pub fn to_ini(&self) -> String {
        let (m, t, k) = (&self.model, &self.train, &self.task);
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "variant = {}", m.ffn_variant.name());
        let _ = writeln!(s, "depth = {}", m.depth);
        let _ = writeln!(s, "dim = {}", m.dim);
        let _ = writeln!(s, "heads = {}", m.heads);
        let _ = writeln!(s, "expansion = {}", m.expansion);
        let _ = writeln!(s, "vocab_size = {}", m.vocab_size);
        let _ = writeln!(s, "max_seq_len = {}", m.max_seq_len);
        let _ = writeln!(s, "num_experts = {}", m.num_experts);
        let _ = writeln!(s, "top_k = {}", m.top_k);
        let _ = writeln!(s, "momentum = {}", m.momentum);
        let _ = writeln!(s, "replaced_layers = {}", layer_set_str(&m.replaced_layers));
        let _ = writeln!(s, "shared_router = {}", m.shared_router);
        let _ = writeln!(s, "init = {}", expert_init_str(m.expert_init));
        let _ = writeln!(s, "bank_order = {}", bank_order_str(m.bank_order));
        let _ = writeln!(s, "init_std = {}", m.init_std);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "total_steps = {}", t.total_steps);
        let _ = writeln!(s, "warmup_steps = {}", t.warmup_steps);
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "min_lr = {}", t.min_lr);
        let _ = writeln!(s, "weight_decay = {}", t.adamw.weight_decay);
        let _ = writeln!(s, "beta1 = {}", t.adamw.beta1);
        let _ = writeln!(s, "beta2 = {}", t.adamw.beta2);
        let _ = writeln!(s, "eps = {}", t.adamw.eps);
        let _ = writeln!(s, "grad_clip = {}", t.grad_clip.unwrap_or(0.0));
        let _ = writeln!(s, "log_interval = {}", t.log_interval);
        let _ = writeln!(s, "ckpt_interval = {}", t.ckpt_interval);
        let _ = writeln!(s, "freeze_fusion_weights = {}", t.freeze_fusion_weights);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "dtype = {}", t.dtype);
        let _ = writeln!(s, "deterministic = {}", t.deterministic);
        let _ = writeln!(s, "\n[task]");
        let _ = writeln!(s, "kind = {}", k.kind.name());
        let _ = writeln!(s, "seq_len = {}", k.seq_len);
        let _ = writeln!(s, "batch_size = {}", k.batch_size);
        let _ = writeln!(s, "num_classes = {}", k.num_classes);
        let _ = writeln!(s, "train_size = {}", k.train_size);
        let _ = writeln!(s, "val_size = {}", k.val_size);
        let _ = writeln!(s, "noise = {}", k.noise);
        let _ = writeln!(s, "val_fraction = {}", k.val_fraction);
        let _ = writeln!(s, "val_windows = {}", k.val_windows);
        s
    }
}
