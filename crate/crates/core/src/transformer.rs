//! Pre-norm Transformer encoder with a pluggable FFN slot.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::exfusion::ExFusionLayer;
use crate::moe::TopKMoeLayer;
use crate::params::{init_normal, ParamId, ParamKind, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnVariant {
    Dense,
    TopKMoe,
    ExFusionSw,
    ExFusionDw,
    ExFusionMb,
}

impl FfnVariant {
    pub const ALL: [FfnVariant; 5] = [
        FfnVariant::Dense,
        FfnVariant::TopKMoe,
        FfnVariant::ExFusionSw,
        FfnVariant::ExFusionDw,
        FfnVariant::ExFusionMb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FfnVariant::Dense => "dense",
            FfnVariant::TopKMoe => "topk_moe",
            FfnVariant::ExFusionSw => "exfusion_sw",
            FfnVariant::ExFusionDw => "exfusion_dw",
            FfnVariant::ExFusionMb => "exfusion_mb",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn is_exfusion(self) -> bool {
        matches!(
            self,
            FfnVariant::ExFusionSw | FfnVariant::ExFusionDw | FfnVariant::ExFusionMb
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Mean-pooled sequence classification.
    Classifier { classes: usize },
    /// Causal next-token prediction over the vocabulary.
    LanguageModel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSet {
    All,
    Only(BTreeSet<usize>),
}

impl LayerSet {
    pub fn contains(&self, layer: usize) -> bool {
        match self {
            LayerSet::All => true,
            LayerSet::Only(set) => set.contains(&layer),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertInit {
    /// Every expert draws its own initial values.
    Independent,
    /// Every expert starts as a copy of the dense layer it replaces.
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankOrder {
    UpdateThenFuse,
    FuseThenUpdate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub expansion: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub head: Head,
    pub ffn_variant: FfnVariant,
    pub num_experts: usize,
    pub top_k: usize,
    pub momentum: f64,
    pub replaced_layers: LayerSet,
    pub shared_router: bool,
    pub expert_init: ExpertInit,
    pub bank_order: BankOrder,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 128,
            heads: 4,
            expansion: 4,
            vocab_size: 64,
            max_seq_len: 64,
            head: Head::Classifier { classes: 4 },
            ffn_variant: FfnVariant::Dense,
            num_experts: 4,
            top_k: 1,
            momentum: 0.95,
            replaced_layers: LayerSet::All,
            shared_router: true,
            expert_init: ExpertInit::Independent,
            bank_order: BankOrder::UpdateThenFuse,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("dim", self.dim),
            ("heads", self.heads),
            ("expansion", self.expansion),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_experts", self.num_experts),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("dim {} is not divisible by {} heads", self.dim, self.heads),
            ));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::config(
                "top_k",
                format!("must satisfy 1 <= top_k <= num_experts ({})", self.num_experts),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must satisfy 0 <= momentum < 1"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std", "must be positive and finite"));
        }
        if let Head::Classifier { classes } = self.head {
            if classes < 2 {
                return Err(Error::config("num_classes", "must be >= 2"));
            }
        }
        if let LayerSet::Only(set) = &self.replaced_layers {
            if let Some(&bad) = set.iter().find(|&&l| l >= self.depth) {
                return Err(Error::config(
                    "replaced_layers",
                    format!("layer {bad} outside [0, {})", self.depth),
                ));
            }
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.expansion
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Whether `layer` carries the configured variant rather than a dense FFN.
    pub fn is_replaced(&self, layer: usize) -> bool {
        self.ffn_variant != FfnVariant::Dense && self.replaced_layers.contains(layer)
    }

    pub fn causal(&self) -> bool {
        self.head == Head::LanguageModel
    }

    /// The same architecture with every FFN dense.
    pub fn dense(&self) -> ModelSpec {
        ModelSpec {
            ffn_variant: FfnVariant::Dense,
            ..self.clone()
        }
    }

    fn dense_ffn_count(&self) -> usize {
        let (d, h) = (self.dim, self.hidden_dim());
        d * h + h + h * d + d
    }

    fn replaced_ffn_count(&self) -> usize {
        let (d, h, n) = (self.dim, self.hidden_dim(), self.num_experts);
        let experts = n * self.dense_ffn_count();
        match self.ffn_variant {
            FfnVariant::Dense => self.dense_ffn_count(),
            FfnVariant::TopKMoe => experts + d * n + n,
            FfnVariant::ExFusionSw => experts,
            FfnVariant::ExFusionDw => experts + n,
            FfnVariant::ExFusionMb if self.shared_router => experts + d * n + n,
            FfnVariant::ExFusionMb => experts + (d * n + n) + (h * n + n),
        }
    }

    /// Closed-form count of learnable parameters (buffers excluded).
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let embed = self.vocab_size * d + self.max_seq_len * d;
        let attn_and_norms = 4 * (d * d + d) + 4 * d;
        let layers: usize = (0..self.depth)
            .map(|l| {
                attn_and_norms
                    + if self.is_replaced(l) {
                        self.replaced_ffn_count()
                    } else {
                        self.dense_ffn_count()
                    }
            })
            .sum();
        let out = match self.head {
            Head::Classifier { classes } => d * classes + classes,
            Head::LanguageModel => d * self.vocab_size + self.vocab_size,
        };
        embed + layers + 2 * d + out
    }

    /// Closed-form count of non-learnable state (memory-bank entries).
    pub fn buffer_count(&self) -> usize {
        if self.ffn_variant != FfnVariant::ExFusionMb {
            return 0;
        }
        let per_layer = if self.shared_router { 1 } else { 2 } * self.num_experts;
        (0..self.depth).filter(|&l| self.is_replaced(l)).count() * per_layer
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward/backward pass: a fresh graph plus lazily bound parameters.
pub struct Ctx<'s, T: Real> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    bound: Vec<Option<Var>>,
    bank_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            bound: vec![None; store.len()],
            bank_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Graph leaf for a stored parameter. Frozen entries and buffers become
    /// constants.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.index()] {
            return Ok(v);
        }
        let entry = self.store.entry(id);
        let v = if entry.trainable() {
            self.graph.param(entry.value.clone())?
        } else {
            self.graph.constant(entry.value.clone())?
        };
        self.bound[id.index()] = Some(v);
        Ok(v)
    }

    pub fn record_bank_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.bank_updates.push((id, value));
    }

    pub fn take_bank_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.bank_updates)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients indexed by [`ParamId`]; `None` where nothing flowed.
    pub fn param_grads(&self) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|v| v.and_then(|v| self.graph.grad(v)))
            .collect()
    }
}

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseFfnParams {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub enum FfnSlot {
    Dense(DenseFfnParams),
    TopK(TopKMoeLayer),
    Fused(ExFusionLayer),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnSlot,
}

pub fn linear<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, p: &Linear) -> Result<Var> {
    let w = ctx.param(p.weight)?;
    let b = ctx.param(p.bias)?;
    let y = ctx.graph.matmul(x, w)?;
    ctx.graph.add(y, b)
}

pub fn layernorm<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, p: &LayerNormParams) -> Result<Var> {
    let g = ctx.param(p.gain)?;
    let b = ctx.param(p.bias)?;
    ctx.graph.layernorm(x, g, b, LAYERNORM_EPS)
}

/// Multi-head scaled dot-product self-attention over `[B, L, D]`.
/// Returns the output and the `[B, H, L, L]` attention weights.
pub fn attention_forward_with_probs<T: Real>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    p: &AttentionParams,
    heads: usize,
    causal: bool,
) -> Result<(Var, Var)> {
    let shape = ctx.graph.shape(x).to_vec();
    if shape.len() != 3 || shape[2] % heads != 0 {
        return Err(Error::shape("attention", &shape, &[heads]));
    }
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let split = |ctx: &mut Ctx<'_, T>, lin: &Linear, perm: &[usize]| -> Result<Var> {
        let y = linear(ctx, x, lin)?;
        let y = ctx.graph.reshape(y, &[b, l, heads, dh])?;
        ctx.graph.permute(y, perm)
    };
    let q = split(ctx, &p.q, &[0, 2, 1, 3])?;
    let kt = split(ctx, &p.k, &[0, 2, 3, 1])?;
    let v = split(ctx, &p.v, &[0, 2, 1, 3])?;
    let scores = ctx.graph.matmul(q, kt)?;
    let scores = ctx
        .graph
        .scale(scores, T::one() / T::from_usize(dh).unwrap().sqrt())?;
    let probs = if causal {
        ctx.graph.causal_softmax(scores)?
    } else {
        ctx.graph.softmax(scores, 3)?
    };
    let mixed = ctx.graph.matmul(probs, v)?;
    let mixed = ctx.graph.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = ctx.graph.reshape(mixed, &[b, l, d])?;
    Ok((linear(ctx, mixed, &p.o)?, probs))
}

pub fn attention_forward<T: Real>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    p: &AttentionParams,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    attention_forward_with_probs(ctx, x, p, heads, causal).map(|(out, _)| out)
}

/// `W_d(GELU(W_u(h)))`.
pub fn ffn_forward<T: Real>(ctx: &mut Ctx<'_, T>, h: Var, p: &DenseFfnParams) -> Result<Var> {
    let u = linear(ctx, h, &p.up)?;
    let a = ctx.graph.gelu(u)?;
    linear(ctx, a, &p.down)
}

impl FfnSlot {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, h: Var) -> Result<Var> {
        match self {
            FfnSlot::Dense(p) => ffn_forward(ctx, h, p),
            FfnSlot::TopK(layer) => crate::moe::topk_moe_forward(ctx, h, layer),
            FfnSlot::Fused(layer) => crate::exfusion::exfusion_forward(ctx, h, layer),
        }
    }
}

/// `x + attn(ln1(x))`, then `+ ffn(ln2(·))`.
pub fn block_forward<T: Real>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    block: &Block,
    spec: &ModelSpec,
) -> Result<Var> {
    let h = layernorm(ctx, x, &block.ln1)?;
    let a = attention_forward(ctx, h, &block.attn, spec.heads, spec.causal())?;
    let x = ctx.graph.add(x, a)?;
    let h = layernorm(ctx, x, &block.ln2)?;
    let f = block.ffn.forward(ctx, h)?;
    ctx.graph.add(x, f)
}

/// Row-major `[batch, seq_len]` token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<usize>, batch: usize, seq_len: usize) -> Result<Self> {
        if batch == 0 || seq_len == 0 || tokens.len() != batch * seq_len {
            return Err(Error::shape("token batch", &[tokens.len()], &[batch, seq_len]));
        }
        Ok(Self {
            tokens,
            batch,
            seq_len,
        })
    }
}

/// Allocates named parameters with per-name initialization streams.
pub(crate) struct Builder<T> {
    pub store: ParamStore<T>,
    seed: u64,
    std: f64,
}

impl<T: Real> Builder<T> {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            store: ParamStore::new(),
            seed,
            std,
        }
    }

    /// Normal-initialized tensor whose stream is keyed by `key`.
    pub fn normal(&mut self, name: &str, key: &str, shape: &[usize]) -> Result<ParamId> {
        let value = init_normal(self.seed, key, shape, self.std);
        self.store.add(name, value, ParamKind::Weight)
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        self.store.add(name, value, kind)
    }

    /// Linear layer named `{name}.weight`/`{name}.bias`, weight stream keyed
    /// by `{key}.weight`.
    pub fn linear_keyed(&mut self, name: &str, key: &str, inp: usize, out: usize) -> Result<Linear> {
        let weight = self.normal(&format!("{name}.weight"), &format!("{key}.weight"), &[inp, out])?;
        let bias = self.tensor(&format!("{name}.bias"), Tensor::zeros(&[out]), ParamKind::NoDecay)?;
        Ok(Linear { weight, bias })
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize) -> Result<Linear> {
        self.linear_keyed(name, name, inp, out)
    }

    pub fn layernorm(&mut self, name: &str, d: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gain: self.tensor(&format!("{name}.gain"), Tensor::full(&[d], T::one()), ParamKind::NoDecay)?,
            bias: self.tensor(&format!("{name}.bias"), Tensor::zeros(&[d]), ParamKind::NoDecay)?,
        })
    }
}

/// Init-stream key for expert `e` of a slot whose dense counterpart is `base`.
/// Expert 0 shares the dense layer's stream.
pub(crate) fn expert_key(base: &str, e: usize, init: ExpertInit) -> String {
    match (init, e) {
        (ExpertInit::Replicate, _) | (_, 0) => base.to_string(),
        _ => format!("{base}#{e}"),
    }
}

#[derive(Clone, Debug)]
pub struct Transformer<T> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNormParams,
    pub head: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamAudit {
    pub expected_params: usize,
    pub allocated_params: usize,
    pub expected_buffers: usize,
    pub allocated_buffers: usize,
}

impl ParamAudit {
    pub fn ok(&self) -> bool {
        self.expected_params == self.allocated_params && self.expected_buffers == self.allocated_buffers
    }
}

impl<T: Real> Transformer<T> {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let mut b = Builder::<T>::new(spec.seed, spec.init_std);
        let tok_emb = b.normal("embed.tokens", "embed.tokens", &[spec.vocab_size, d])?;
        let pos_emb = b.normal("embed.positions", "embed.positions", &[spec.max_seq_len, d])?;
        let mut blocks = Vec::with_capacity(spec.depth);
        for l in 0..spec.depth {
            let p = format!("layers.{l}");
            let ln1 = b.layernorm(&format!("{p}.ln1"), d)?;
            let attn = AttentionParams {
                q: b.linear(&format!("{p}.attn.q"), d, d)?,
                k: b.linear(&format!("{p}.attn.k"), d, d)?,
                v: b.linear(&format!("{p}.attn.v"), d, d)?,
                o: b.linear(&format!("{p}.attn.o"), d, d)?,
            };
            let ln2 = b.layernorm(&format!("{p}.ln2"), d)?;
            let prefix = format!("{p}.ffn");
            let ffn = if !spec.is_replaced(l) {
                FfnSlot::Dense(DenseFfnParams {
                    up: b.linear(&format!("{prefix}.up"), d, spec.hidden_dim())?,
                    down: b.linear(&format!("{prefix}.down"), spec.hidden_dim(), d)?,
                })
            } else if spec.ffn_variant == FfnVariant::TopKMoe {
                FfnSlot::TopK(TopKMoeLayer::build(&mut b, &prefix, &spec)?)
            } else {
                FfnSlot::Fused(ExFusionLayer::build(&mut b, &prefix, &spec)?)
            };
            blocks.push(Block { ln1, attn, ln2, ffn });
        }
        let final_ln = b.layernorm("final_ln", d)?;
        let outputs = match spec.head {
            Head::Classifier { classes } => classes,
            Head::LanguageModel => spec.vocab_size,
        };
        let head = b.linear("head", d, outputs)?;
        Ok(Self {
            spec,
            store: b.store,
            tok_emb,
            pos_emb,
            blocks,
            final_ln,
            head,
        })
    }

    /// Logits: `[B, classes]` for classification, `[B, L, vocab]` for LM.
    /// Only the layout of `self` is used; values come from the context's
    /// store, which may hold another precision.
    pub fn forward<U: Real>(&self, ctx: &mut Ctx<'_, U>, batch: &TokenBatch) -> Result<Var> {
        let (bsz, l, d) = (batch.batch, batch.seq_len, self.spec.dim);
        if l > self.spec.max_seq_len {
            return Err(Error::invalid(
                "model_forward",
                format!("sequence length {l} exceeds max_seq_len {}", self.spec.max_seq_len),
            ));
        }
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= self.spec.vocab_size) {
            return Err(Error::OutOfRange {
                what: "vocabulary",
                index: bad,
                size: self.spec.vocab_size,
            });
        }
        let tok = ctx.param(self.tok_emb)?;
        let x = ctx.graph.index_select_rows(tok, &batch.tokens)?;
        let x = ctx.graph.reshape(x, &[bsz, l, d])?;
        let pos = ctx.param(self.pos_emb)?;
        let positions: Vec<usize> = (0..l).collect();
        let p = ctx.graph.index_select_rows(pos, &positions)?;
        let mut x = ctx.graph.add(x, p)?;
        for block in &self.blocks {
            x = block_forward(ctx, x, block, &self.spec)?;
        }
        let x = layernorm(ctx, x, &self.final_ln)?;
        match self.spec.head {
            Head::Classifier { .. } => {
                let pooled = ctx.graph.mean_axis(x, 1)?;
                linear(ctx, pooled, &self.head)
            }
            Head::LanguageModel => linear(ctx, x, &self.head),
        }
    }

    /// Mean cross-entropy. Targets hold one class per sequence, or one next
    /// token per position for language modeling.
    pub fn loss<U: Real>(
        &self,
        ctx: &mut Ctx<'_, U>,
        batch: &TokenBatch,
        targets: &[usize],
    ) -> Result<(Var, Var)> {
        let logits = self.forward(ctx, batch)?;
        let flat = match self.spec.head {
            Head::Classifier { .. } => logits,
            Head::LanguageModel => ctx
                .graph
                .reshape(logits, &[batch.batch * batch.seq_len, self.spec.vocab_size])?,
        };
        let loss = ctx.graph.cross_entropy(flat, targets)?;
        Ok((logits, loss))
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(&self.store, Mode::Eval);
        let out = self.forward(&mut ctx, batch)?;
        Ok(ctx.graph.value(out).clone())
    }

    pub fn audit_params(&self) -> ParamAudit {
        ParamAudit {
            expected_params: self.spec.param_count(),
            allocated_params: self.store.parameter_count(),
            expected_buffers: self.spec.buffer_count(),
            allocated_buffers: self.store.buffer_count(),
        }
    }

    /// Marks every learnable fusion-weight vector as frozen (or not).
    pub fn freeze_fusion_weights(&mut self, frozen: bool) {
        let ids: Vec<ParamId> = self
            .store
            .ids()
            .filter(|&id| self.store.entry(id).kind == ParamKind::FusionWeights)
            .collect();
        for id in ids {
            self.store.set_frozen(id, frozen);
        }
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer {
            spec: self.spec.clone(),
            store: self.store.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            blocks: self.blocks.clone(),
            final_ln: self.final_ln,
            head: self.head,
        }
    }

    /// Overwrites parameter values by name. Every parameter must be supplied
    /// exactly once with a matching shape.
    pub fn load_named(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.store.len()];
        for (name, value) in named {
            let id = self
                .store
                .id(&name)
                .ok_or_else(|| Error::invalid("load", format!("unexpected parameter `{name}`")))?;
            self.store.set(id, value)?;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(
                "load",
                format!("missing parameter `{}`", self.store.entries()[i].name),
            ));
        }
        Ok(())
    }

    pub fn apply_bank_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
        for (id, value) in updates {
            self.store.set(id, value)?;
        }
        Ok(())
    }
}
