//! Vanilla top-k mixture-of-experts FFN, the sparse baseline.
//!
//! No auxiliary balancing loss and no capacity limit: every token reaches
//! its k best experts.

use crate::error::{Error, Result};
use crate::tensor::{Real, Var};
use crate::transformer::{expert_key, ffn_forward, linear, Builder, Ctx, DenseFfnParams, Linear, ModelSpec};

/// Gating layer `W_g: [D, N]` plus bias.
#[derive(Clone, Copy, Debug)]
pub struct Router {
    pub linear: Linear,
    pub experts: usize,
}

impl Router {
    pub(crate) fn build<T: Real>(b: &mut Builder<T>, name: &str, inp: usize, experts: usize) -> Result<Self> {
        Ok(Self {
            linear: b.linear(name, inp, experts)?,
            experts,
        })
    }
}

/// Per-token softmax over experts: `[.., D] -> [.., N]`.
pub fn route<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, r: &Router) -> Result<Var> {
    let logits = linear(ctx, x, &r.linear)?;
    let axis = ctx.graph.shape(logits).len() - 1;
    ctx.graph.softmax(logits, axis)
}

#[derive(Clone, Debug)]
pub struct TopKMoeLayer {
    pub experts: Vec<DenseFfnParams>,
    pub router: Router,
    pub k: usize,
}

impl TopKMoeLayer {
    pub(crate) fn build<T: Real>(b: &mut Builder<T>, prefix: &str, spec: &ModelSpec) -> Result<Self> {
        let (d, h) = (spec.dim, spec.hidden_dim());
        let experts = (0..spec.num_experts)
            .map(|e| {
                let name = format!("{prefix}.experts.{e}");
                Ok(DenseFfnParams {
                    up: b.linear_keyed(
                        &format!("{name}.up"),
                        &expert_key(&format!("{prefix}.up"), e, spec.expert_init),
                        d,
                        h,
                    )?,
                    down: b.linear_keyed(
                        &format!("{name}.down"),
                        &expert_key(&format!("{prefix}.down"), e, spec.expert_init),
                        h,
                        d,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let router = Router::build(b, &format!("{prefix}.router"), d, spec.num_experts)?;
        Ok(Self {
            experts,
            router,
            k: spec.top_k,
        })
    }
}

/// Indices of the `k` largest gates, in descending gate order. Ties go to
/// the lower expert index.
pub fn select_top_k<T: Real>(gates: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gates.len()).collect();
    order.sort_by(|&a, &b| {
        gates[b]
            .partial_cmp(&gates[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// `Σ_{i∈K} G_i(x)·E_i(x)` per token, dispatching each expert only on the
/// tokens that selected it.
pub fn topk_moe_forward<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, layer: &TopKMoeLayer) -> Result<Var> {
    let shape = ctx.graph.shape(x).to_vec();
    let n = layer.experts.len();
    if layer.k == 0 || layer.k > n {
        return Err(Error::invalid("topk_moe", format!("k = {} with {n} experts", layer.k)));
    }
    let d = *shape.last().expect("rank >= 1");
    let tokens = shape.iter().product::<usize>() / d;
    let x2 = ctx.graph.reshape(x, &[tokens, d])?;
    let gates = route(ctx, x2, &layer.router)?;

    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    {
        let g = ctx.graph.value(gates).data();
        for t in 0..tokens {
            for e in select_top_k(&g[t * n..(t + 1) * n], layer.k) {
                rows[e].push(t);
            }
        }
    }

    let mut out: Option<Var> = None;
    for (e, ids) in rows.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let xe = ctx.graph.index_select_rows(x2, ids)?;
        let ye = ffn_forward(ctx, xe, &layer.experts[e])?;
        let flat: Vec<usize> = ids.iter().map(|&t| t * n + e).collect();
        let ge = ctx.graph.select_flat(gates, &flat)?;
        let ge = ctx.graph.reshape(ge, &[ids.len(), 1])?;
        let contrib = ctx.graph.mul(ye, ge)?;
        let scattered = ctx.graph.index_add_rows(contrib, ids, tokens)?;
        out = Some(match out {
            None => scattered,
            Some(acc) => ctx.graph.add(acc, scattered)?,
        });
    }
    let out = out.expect("every token selects k >= 1 experts");
    ctx.graph.reshape(out, &shape)
}

#[cfg(test)]
mod tests;
