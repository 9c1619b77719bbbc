use proptest::prelude::*;

use super::*;
use crate::gradcheck::{check_store_gradients, rel_tolerance, StoreFn};
use crate::params::ParamStore;
use crate::tensor::{DType, Tensor};
use crate::testing::{random_tensor, tiny_spec};
use crate::transformer::{FfnVariant, Mode};

fn layer_store(n: usize, k: usize, seed: u64) -> (ParamStore<f64>, TopKMoeLayer) {
    let spec = ModelSpec {
        num_experts: n,
        top_k: k,
        seed,
        init_std: 0.5,
        ..tiny_spec(FfnVariant::TopKMoe)
    };
    let mut b = Builder::<f64>::new(spec.seed, spec.init_std);
    let layer = TopKMoeLayer::build(&mut b, "moe", &spec).unwrap();
    (b.store, layer)
}

fn set_gates(store: &mut ParamStore<f64>, r: &Router, gates: &[f64]) {
    let shape = store.value(r.linear.weight).shape().to_vec();
    store.set(r.linear.weight, Tensor::zeros(&shape)).unwrap();
    let ln: Vec<f64> = gates.iter().map(|g| g.ln()).collect();
    store.set(r.linear.bias, Tensor::from_f64(&[gates.len()], &ln).unwrap()).unwrap();
}

fn run<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Ctx<'_, f64>, Var) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, Mode::Train);
    let xv = ctx.graph.constant(x.clone()).unwrap();
    let y = f(&mut ctx, xv).unwrap();
    ctx.graph.value(y).clone()
}

fn scaled(t: &Tensor<f64>, s: f64) -> Tensor<f64> {
    Tensor::from_fn(t.shape(), |i| s * t.data()[i])
}

#[test]
fn zero_router_is_uniform() {
    let (mut store, layer) = layer_store(4, 1, 1);
    set_gates(&mut store, &layer.router, &[1.0; 4]);
    let g = run(&store, &random_tensor(2, &[2, 3, 8], 1.0), |c, x| route(c, x, &layer.router));
    assert_eq!(g.shape(), &[2, 3, 4]);
    assert!(g.data().iter().all(|&v| v == 0.25));
}

#[test]
fn single_expert_gate_is_exactly_one() {
    let (store, layer) = layer_store(1, 1, 3);
    let g = run(&store, &random_tensor(4, &[3, 8], 3.0), |c, x| route(c, x, &layer.router));
    assert!(g.data().iter().all(|&v| v == 1.0));
}

#[test]
fn gate_rows_sum_to_one() {
    let (store, layer) = layer_store(4, 2, 5);
    for seed in 0..20 {
        let g = run(&store, &random_tensor(seed, &[2, 5, 8], 2.0), |c, x| route(c, x, &layer.router));
        for row in g.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn top_one_picks_the_largest_gate() {
    let (mut store, layer) = layer_store(4, 1, 6);
    set_gates(&mut store, &layer.router, &[0.1, 0.6, 0.2, 0.1]);
    let x = random_tensor(7, &[1, 1, 8], 1.0);
    let y = run(&store, &x, |c, x| topk_moe_forward(c, x, &layer));
    let e2 = run(&store, &x, |c, x| ffn_forward(c, x, &layer.experts[1]));
    assert!(y.max_abs_diff(&scaled(&e2, 0.6)).unwrap() < 1e-12);
}

#[test]
fn k_equal_n_is_the_full_weighted_sum() {
    let (store, layer) = layer_store(3, 3, 8);
    let x = random_tensor(9, &[2, 3, 8], 1.0);
    let y = run(&store, &x, |c, x| topk_moe_forward(c, x, &layer));
    let g = run(&store, &x, |c, x| route(c, x, &layer.router));
    let mut expected = Tensor::zeros(&[2, 3, 8]);
    for (e, p) in layer.experts.iter().enumerate() {
        let ye = run(&store, &x, |c, x| ffn_forward(c, x, p));
        for t in 0..6 {
            for j in 0..8 {
                expected.data_mut()[t * 8 + j] += g.data()[t * 3 + e] * ye.data()[t * 8 + j];
            }
        }
    }
    assert!(y.max_abs_diff(&expected).unwrap() < 1e-12);
}

fn identical_experts(n: usize, k: usize, seed: u64) -> (ParamStore<f64>, TopKMoeLayer) {
    let (mut store, layer) = layer_store(n, k, seed);
    let first = layer.experts[0];
    for p in &layer.experts[1..] {
        for (dst, src) in [
            (p.up.weight, first.up.weight),
            (p.up.bias, first.up.bias),
            (p.down.weight, first.down.weight),
            (p.down.bias, first.down.bias),
        ] {
            let v = store.value(src).clone();
            store.set(dst, v).unwrap();
        }
    }
    (store, layer)
}

#[test]
fn identical_experts_top_one_scales_by_max_gate() {
    let (store, layer) = identical_experts(4, 1, 10);
    let x = random_tensor(11, &[5, 8], 1.0);
    let y = run(&store, &x, |c, x| topk_moe_forward(c, x, &layer));
    let e = run(&store, &x, |c, x| ffn_forward(c, x, &layer.experts[0]));
    let g = run(&store, &x, |c, x| route(c, x, &layer.router));
    for t in 0..5 {
        let gmax = g.data()[t * 4..(t + 1) * 4].iter().cloned().fold(f64::MIN, f64::max);
        for j in 0..8 {
            assert!((y.data()[t * 8 + j] - gmax * e.data()[t * 8 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_experts_with_all_selected_equal_the_dense_ffn() {
    let (store, layer) = identical_experts(4, 4, 12);
    let x = random_tensor(13, &[2, 3, 8], 1.0);
    let y = run(&store, &x, |c, x| topk_moe_forward(c, x, &layer));
    let e = run(&store, &x, |c, x| ffn_forward(c, x, &layer.experts[0]));
    assert!(y.max_abs_diff(&e).unwrap() < 1e-5);
}

#[test]
fn ties_go_to_the_lowest_index() {
    assert_eq!(select_top_k(&[0.25f64; 4], 2), vec![0, 1]);
    assert_eq!(select_top_k(&[0.1f64, 0.3, 0.3, 0.3], 1), vec![1]);
    assert_eq!(select_top_k(&[0.4f64, 0.1, 0.4, 0.1], 3), vec![0, 2, 1]);
}

proptest! {
    #[test]
    fn selection_has_k_distinct_indices(gates in prop::collection::vec(0.0f64..1.0, 1..9), k in 1usize..9) {
        let k = k.min(gates.len());
        let sel = select_top_k(&gates, k);
        prop_assert_eq!(sel.len(), k);
        let mut sorted = sel.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        let floor = sel.iter().map(|&i| gates[i]).fold(f64::MAX, f64::min);
        for (i, &g) in gates.iter().enumerate() {
            if !sel.contains(&i) {
                prop_assert!(g <= floor);
            }
        }
    }
}

struct MoeProbe {
    layer: TopKMoeLayer,
    x: Tensor<f64>,
    probe: Tensor<f64>,
}

impl StoreFn for MoeProbe {
    fn eval<T: Real>(&self, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let x = ctx.graph.constant(self.x.cast())?;
        let y = topk_moe_forward(ctx, x, &self.layer)?;
        let p = ctx.graph.constant(self.probe.cast())?;
        let yp = ctx.graph.mul(y, p)?;
        ctx.graph.sum(yp)
    }
}

#[test]
fn router_and_expert_gradients_match_finite_differences() {
    for (seed, k) in [(14, 1), (15, 2), (16, 3)] {
        let (store, layer) = layer_store(3, k, seed);
        let f = MoeProbe {
            layer,
            x: random_tensor(seed + 100, &[2, 3, 8], 1.0),
            probe: random_tensor(seed + 200, &[2, 3, 8], 1.0),
        };
        let r32 = check_store_gradients::<f32, _>(&f, &store, Mode::Train).unwrap();
        let r64 = check_store_gradients::<f64, _>(&f, &store, Mode::Train).unwrap();
        assert!(r32.max_rel_err < rel_tolerance(DType::F32), "k={k} {r32:?}");
        assert!(r64.max_rel_err < rel_tolerance(DType::F64), "k={k} {r64:?}");
    }
}

#[test]
fn unselected_experts_get_no_gradient() {
    let (mut store, layer) = layer_store(4, 1, 17);
    set_gates(&mut store, &layer.router, &[0.1, 0.6, 0.2, 0.1]);
    let f = MoeProbe {
        layer: layer.clone(),
        x: random_tensor(18, &[1, 2, 8], 1.0),
        probe: random_tensor(19, &[1, 2, 8], 1.0),
    };
    let mut ctx = Ctx::new(&store, Mode::Train);
    let loss = f.eval(&mut ctx).unwrap();
    ctx.backward(loss).unwrap();
    let grads = ctx.param_grads();
    // The router weight is zero, so every token routes by bias alone.
    assert!(grads[layer.experts[1].up.weight.index()].is_some());
    for e in [0, 2, 3] {
        assert!(grads[layer.experts[e].up.weight.index()].is_none());
    }
}
