//! Parameter-level expert fusion for the FFN slot.
//!
//! Each replaced FFN owns an up-projection set and a down-projection set of
//! N affine experts. Every forward pass first fuses each set into a single
//! affine layer, `Σ w_i·W_i` and `Σ w_i·b_i`, then runs an ordinary FFN
//! through the two fused layers. Variants differ only in where `w` comes
//! from:
//!
//! * static: `w_i = 1/N`;
//! * dynamic: a learnable vector shared by both sets;
//! * memory bank: a router's softmax, averaged over every token of the
//!   batch, folded into an EMA bank `m ← δ·m + (1−δ)·w` that is then used as
//!   the fusion weights.
//!
//! Because fusion is linear, every variant collapses into a plain dense FFN
//! once training ends.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::moe::{route, Router};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{kernels, Real, Tensor, Var};
use crate::transformer::{
    expert_key, BankOrder, Builder, Ctx, FfnSlot, FfnVariant, Linear, ModelSpec, Mode, Transformer,
};

/// N affine layers of identical shape occupying one FFN position.
#[derive(Clone, Debug)]
pub struct ExpertSet {
    pub experts: Vec<Linear>,
}

impl ExpertSet {
    fn build<T: Real>(b: &mut Builder<T>, base: &str, spec: &ModelSpec, inp: usize, out: usize) -> Result<Self> {
        let experts = (0..spec.num_experts)
            .map(|e| b.linear_keyed(&format!("{base}.experts.{e}"), &expert_key(base, e, spec.expert_init), inp, out))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn values<T: Real>(&self, store: &ParamStore<T>) -> Vec<Affine<T>> {
        self.experts
            .iter()
            .map(|l| Affine {
                weight: store.value(l.weight).clone(),
                bias: store.value(l.bias).clone(),
            })
            .collect()
    }
}

/// Router and bank serving both expert sets, or one pair per set.
#[derive(Clone, Debug)]
pub enum BankRouting {
    /// One router reading the FFN input; its bank fuses both sets.
    Shared { router: Router, bank: ParamId },
    /// The up router reads the FFN input, the down router reads the hidden
    /// activation.
    Split {
        up_router: Router,
        up_bank: ParamId,
        down_router: Router,
        down_bank: ParamId,
    },
}

#[derive(Clone, Debug)]
pub enum FusionState {
    Static,
    Dynamic { weights: ParamId },
    MemoryBank(BankRouting),
}

#[derive(Clone, Debug)]
pub struct ExFusionLayer {
    pub up: ExpertSet,
    pub down: ExpertSet,
    pub state: FusionState,
    pub momentum: f64,
    pub order: BankOrder,
}

impl ExFusionLayer {
    pub(crate) fn build<T: Real>(b: &mut Builder<T>, prefix: &str, spec: &ModelSpec) -> Result<Self> {
        let (d, h, n) = (spec.dim, spec.hidden_dim(), spec.num_experts);
        let up = ExpertSet::build(b, &format!("{prefix}.up"), spec, d, h)?;
        let down = ExpertSet::build(b, &format!("{prefix}.down"), spec, h, d)?;
        let bank = |b: &mut Builder<T>, name: String| b.tensor(&name, Tensor::zeros(&[n]), ParamKind::Buffer);
        let state = match spec.ffn_variant {
            FfnVariant::ExFusionSw => FusionState::Static,
            FfnVariant::ExFusionDw => FusionState::Dynamic {
                weights: b.tensor(
                    &format!("{prefix}.fusion_weights"),
                    Tensor::full(&[n], uniform(n)),
                    ParamKind::FusionWeights,
                )?,
            },
            FfnVariant::ExFusionMb if spec.shared_router => FusionState::MemoryBank(BankRouting::Shared {
                router: Router::build(b, &format!("{prefix}.router"), d, n)?,
                bank: bank(b, format!("{prefix}.bank"))?,
            }),
            FfnVariant::ExFusionMb => FusionState::MemoryBank(BankRouting::Split {
                up_router: Router::build(b, &format!("{prefix}.up.router"), d, n)?,
                up_bank: bank(b, format!("{prefix}.up.bank"))?,
                down_router: Router::build(b, &format!("{prefix}.down.router"), h, n)?,
                down_bank: bank(b, format!("{prefix}.down.bank"))?,
            }),
            other => {
                return Err(Error::invalid(
                    "exfusion",
                    format!("{} is not a fusion variant", other.name()),
                ))
            }
        };
        Ok(Self {
            up,
            down,
            state,
            momentum: spec.momentum,
            order: spec.bank_order,
        })
    }

    /// Fusion weights currently in force outside training: `(up, down)`.
    pub fn eval_weights<T: Real>(&self, store: &ParamStore<T>) -> (Vec<T>, Vec<T>) {
        let n = self.up.len();
        match &self.state {
            FusionState::Static => (vec![uniform(n); n], vec![uniform(n); n]),
            FusionState::Dynamic { weights } => {
                let w = store.value(*weights).data().to_vec();
                (w.clone(), w)
            }
            FusionState::MemoryBank(BankRouting::Shared { bank, .. }) => {
                let m = store.value(*bank).data().to_vec();
                (m.clone(), m)
            }
            FusionState::MemoryBank(BankRouting::Split { up_bank, down_bank, .. }) => (
                store.value(*up_bank).data().to_vec(),
                store.value(*down_bank).data().to_vec(),
            ),
        }
    }

    /// The dense `(up, down)` pair this layer computes in eval mode.
    pub fn fused<T: Real>(&self, store: &ParamStore<T>) -> Result<(Affine<T>, Affine<T>)> {
        let (wu, wd) = self.eval_weights(store);
        Ok((fuse(&self.up.values(store), &wu)?, fuse(&self.down.values(store), &wd)?))
    }
}

fn uniform<T: Real>(n: usize) -> T {
    T::one() / T::from_usize(n).expect("expert count fits the float type")
}

/// Plain affine layer values, `x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `(Σ w_i·W_i, Σ w_i·b_i)`.
pub fn fuse<T: Real>(experts: &[Affine<T>], weights: &[T]) -> Result<Affine<T>> {
    if experts.is_empty() || experts.len() != weights.len() {
        return Err(Error::shape("fuse", &[experts.len()], &[weights.len()]));
    }
    if !weights.iter().all(|w| w.is_finite()) {
        return Err(Error::NonFinite("fusion weights".into()));
    }
    let (ws, bs) = (experts[0].weight.shape(), experts[0].bias.shape());
    for e in &experts[1..] {
        if e.weight.shape() != ws {
            return Err(Error::shape("fuse", ws, e.weight.shape()));
        }
        if e.bias.shape() != bs {
            return Err(Error::shape("fuse", bs, e.bias.shape()));
        }
    }
    let combine = |pick: fn(&Affine<T>) -> &Tensor<T>, shape: &[usize]| {
        let items: Vec<&[T]> = experts.iter().map(|e| pick(e).data()).collect();
        Tensor::new(shape, kernels::weighted_sum(&items, weights))
    };
    Ok(Affine {
        weight: combine(|e| &e.weight, ws)?,
        bias: combine(|e| &e.bias, bs)?,
    })
}

/// Fuses an expert set inside the graph, returning `(weight, bias)` nodes.
pub fn fuse_in_graph<T: Real>(ctx: &mut Ctx<'_, T>, set: &ExpertSet, w: Var) -> Result<(Var, Var)> {
    let mut weights = Vec::with_capacity(set.len());
    let mut biases = Vec::with_capacity(set.len());
    for l in &set.experts {
        weights.push(ctx.param(l.weight)?);
        biases.push(ctx.param(l.bias)?);
    }
    Ok((
        ctx.graph.weighted_sum(&weights, w)?,
        ctx.graph.weighted_sum(&biases, w)?,
    ))
}

fn affine<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = ctx.graph.matmul(x, w)?;
    ctx.graph.add(y, b)
}

/// Softmax over experts for every token, averaged over all tokens: `[N]`.
pub fn mb_router_weights<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, router: &Router) -> Result<Var> {
    let shape = ctx.graph.shape(x).to_vec();
    let d = *shape
        .last()
        .ok_or_else(|| Error::invalid("mb_router_weights", "scalar input"))?;
    let tokens = shape.iter().product::<usize>() / d;
    if tokens == 0 {
        return Err(Error::invalid("mb_router_weights", "empty batch"));
    }
    let x2 = ctx.graph.reshape(x, &[tokens, d])?;
    let g = route(ctx, x2, router)?;
    ctx.graph.mean_axis(g, 0)
}

fn check_momentum(delta: f64) -> Result<()> {
    if (0.0..1.0).contains(&delta) {
        Ok(())
    } else {
        Err(Error::invalid("mb_update", format!("momentum {delta} outside [0, 1)")))
    }
}

/// `m_i ← δ·m_i + (1−δ)·w_i`.
pub fn mb_update<T: Real>(bank: &[T], w: &[T], delta: f64) -> Result<Vec<T>> {
    check_momentum(delta)?;
    if bank.len() != w.len() {
        return Err(Error::shape("mb_update", &[bank.len()], &[w.len()]));
    }
    Ok(kernels::ema(bank, w, T::from_f64_lossy(delta)))
}

/// Fusion weights from one router/bank pair. In training mode this routes
/// `input`, schedules the bank update and returns either the updated bank
/// (history detached, current term differentiable) or the previous bank,
/// depending on `order`. In eval mode it returns the frozen bank and never
/// touches the router.
fn bank_weights<T: Real>(
    ctx: &mut Ctx<'_, T>,
    input: Var,
    router: &Router,
    bank: ParamId,
    delta: f64,
    order: BankOrder,
) -> Result<Var> {
    let old = ctx.store().value(bank).clone();
    if ctx.mode() == Mode::Eval {
        return ctx.graph.constant(old);
    }
    check_momentum(delta)?;
    let w = mb_router_weights(ctx, input, router)?;
    let delta_t = T::from_f64_lossy(delta);
    let updated = kernels::ema(old.data(), ctx.graph.value(w).data(), delta_t);
    let updated = Tensor::new(old.shape(), updated)?;
    ctx.record_bank_update(bank, updated);
    match order {
        BankOrder::UpdateThenFuse => {
            let history = Tensor::new(old.shape(), old.data().iter().map(|&m| delta_t * m).collect())?;
            let history = ctx.graph.constant(history)?;
            let current = ctx.graph.scale(w, T::one() - delta_t)?;
            ctx.graph.add(history, current)
        }
        BankOrder::FuseThenUpdate => ctx.graph.constant(old),
    }
}

/// `Ē^d(GELU(Ē^u(x)))` with fusion weights drawn from the layer's state.
pub fn exfusion_forward<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, layer: &ExFusionLayer) -> Result<Var> {
    if layer.up.len() != layer.down.len() || layer.up.is_empty() {
        return Err(Error::shape("exfusion", &[layer.up.len()], &[layer.down.len()]));
    }
    let n = layer.up.len();
    let shared = match &layer.state {
        FusionState::Static => Some(ctx.graph.constant(Tensor::full(&[n], uniform(n)))?),
        FusionState::Dynamic { weights } => Some(ctx.param(*weights)?),
        FusionState::MemoryBank(BankRouting::Shared { router, bank }) => {
            Some(bank_weights(ctx, x, router, *bank, layer.momentum, layer.order)?)
        }
        FusionState::MemoryBank(BankRouting::Split { .. }) => None,
    };
    if let Some(w) = shared {
        let up = fuse_in_graph(ctx, &layer.up, w)?;
        let hidden = affine(ctx, x, up)?;
        let hidden = ctx.graph.gelu(hidden)?;
        let down = fuse_in_graph(ctx, &layer.down, w)?;
        return affine(ctx, hidden, down);
    }
    let FusionState::MemoryBank(BankRouting::Split {
        up_router,
        up_bank,
        down_router,
        down_bank,
    }) = &layer.state
    else {
        unreachable!("shared weights handled above")
    };
    let wu = bank_weights(ctx, x, up_router, *up_bank, layer.momentum, layer.order)?;
    let up = fuse_in_graph(ctx, &layer.up, wu)?;
    let hidden = affine(ctx, x, up)?;
    let hidden = ctx.graph.gelu(hidden)?;
    let wd = bank_weights(ctx, hidden, down_router, *down_bank, layer.momentum, layer.order)?;
    let down = fuse_in_graph(ctx, &layer.down, wd)?;
    affine(ctx, hidden, down)
}

/// Static-weight fusion, `w_i = 1/N`.
pub fn exfusion_sw_forward<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, up: &ExpertSet, down: &ExpertSet) -> Result<Var> {
    let layer = ExFusionLayer {
        up: up.clone(),
        down: down.clone(),
        state: FusionState::Static,
        momentum: 0.0,
        order: BankOrder::UpdateThenFuse,
    };
    exfusion_forward(ctx, x, &layer)
}

/// Learnable-weight fusion with one vector shared by both sets.
pub fn exfusion_dw_forward<T: Real>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    up: &ExpertSet,
    down: &ExpertSet,
    weights: ParamId,
) -> Result<Var> {
    let layer = ExFusionLayer {
        up: up.clone(),
        down: down.clone(),
        state: FusionState::Dynamic { weights },
        momentum: 0.0,
        order: BankOrder::UpdateThenFuse,
    };
    exfusion_forward(ctx, x, &layer)
}

/// Replaces every fused FFN with the dense FFN it computes in eval mode and
/// drops routers, banks and fusion weights.
pub fn collapse_to_dense<T: Real>(model: &Transformer<T>) -> Result<Transformer<T>> {
    if model.spec.ffn_variant == FfnVariant::TopKMoe {
        return Err(Error::invalid(
            "collapse",
            "top-k MoE layers route per token and have no dense equivalent",
        ));
    }
    let mut dense = Transformer::<T>::new(model.spec.dense())?;
    let mut named = Vec::with_capacity(dense.store.len());
    for entry in model.store.entries() {
        if dense.store.id(&entry.name).is_some() {
            named.push((entry.name.clone(), entry.value.clone()));
        }
    }
    for (l, block) in model.blocks.iter().enumerate() {
        match &block.ffn {
            FfnSlot::Dense(_) => {}
            FfnSlot::Fused(layer) => {
                let (up, down) = layer.fused(&model.store)?;
                let p = format!("layers.{l}.ffn");
                named.push((format!("{p}.up.weight"), up.weight));
                named.push((format!("{p}.up.bias"), up.bias));
                named.push((format!("{p}.down.weight"), down.weight));
                named.push((format!("{p}.down.bias"), down.bias));
            }
            FfnSlot::TopK(_) => unreachable!("rejected above"),
        }
    }
    dense.load_named(named)?;
    Ok(dense)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceReport {
    pub empirical_var: f64,
    pub predicted_var: f64,
    pub empirical_mean: f64,
    pub bias: f64,
}

/// Monte-Carlo check that averaging `k` noisy estimates `b + ξ_i`,
/// `ξ_i ~ N(0, σ²)`, keeps the bias and divides the variance by `k`.
pub fn variance_reduction_demo(k: usize, sigma: f64, bias: f64, trials: usize, seed: u64) -> Result<VarianceReport> {
    if k == 0 || trials == 0 {
        return Err(Error::invalid("variance_demo", "k and trials must be >= 1"));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid("variance_demo", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..trials)
        .map(|_| (0..k).map(|_| bias + noise.sample(&mut rng)).sum::<f64>() / k as f64)
        .collect();
    let mean = means.iter().sum::<f64>() / trials as f64;
    let var = if trials > 1 {
        means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (trials - 1) as f64
    } else {
        0.0
    };
    Ok(VarianceReport {
        empirical_var: var,
        predicted_var: sigma * sigma / k as f64,
        empirical_mean: mean,
        bias,
    })
}

#[cfg(test)]
mod tests;
