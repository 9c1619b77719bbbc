use proptest::prelude::*;

use super::*;
use crate::gradcheck::{check_store_gradients, rel_tolerance, StoreFn};
use crate::tensor::DType;
use crate::testing::{random_batch, random_tensor, randomize, tiny_spec};
use crate::transformer::{ffn_forward, DenseFfnParams, LayerSet};

fn spec(variant: FfnVariant, n: usize, shared: bool) -> ModelSpec {
    ModelSpec {
        num_experts: n,
        top_k: 1,
        shared_router: shared,
        ..tiny_spec(variant)
    }
}

/// A standalone fused layer whose every learnable value is random.
fn layer_store<T: Real>(spec: &ModelSpec, seed: u64) -> (ParamStore<T>, ExFusionLayer) {
    let mut b = Builder::<T>::new(seed, 0.5);
    let layer = ExFusionLayer::build(&mut b, "ffn", spec).unwrap();
    let mut store = b.store;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let kind = store.entry(id).kind;
        if matches!(kind, ParamKind::Weight | ParamKind::NoDecay) {
            let shape = store.value(id).shape().to_vec();
            store.set(id, random_tensor(seed * 1000 + id.index() as u64, &shape, 0.5)).unwrap();
        }
    }
    (store, layer)
}

fn run<T: Real, F>(store: &ParamStore<T>, mode: Mode, x: &Tensor<f64>, f: F) -> (Tensor<T>, Vec<(ParamId, Tensor<T>)>)
where
    F: FnOnce(&mut Ctx<'_, T>, Var) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, mode);
    let xv = ctx.graph.constant(x.cast()).unwrap();
    let y = f(&mut ctx, xv).unwrap();
    (ctx.graph.value(y).clone(), ctx.take_bank_updates())
}

fn apply_affine(x: &[f64], rows: usize, a: &Affine<f64>) -> Vec<f64> {
    let (inp, out) = (a.weight.shape()[0], a.weight.shape()[1]);
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for j in 0..out {
            let mut acc = a.bias.data()[j];
            for i in 0..inp {
                acc += x[r * inp + i] * a.weight.data()[i * out + j];
            }
            y[r * out + j] = acc;
        }
    }
    y
}

fn ffn_oracle(x: &Tensor<f64>, up: &Affine<f64>, down: &Affine<f64>) -> Tensor<f64> {
    let d = *x.shape().last().unwrap();
    let rows = x.numel() / d;
    let h: Vec<f64> = apply_affine(x.data(), rows, up)
        .into_iter()
        .map(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
        .collect();
    Tensor::new(x.shape(), apply_affine(&h, rows, down)).unwrap()
}

fn affine_f64(w: &[f64], shape: &[usize], b: &[f64]) -> Affine<f64> {
    Affine {
        weight: Tensor::from_f64(shape, w).unwrap(),
        bias: Tensor::from_f64(&[shape[1]], b).unwrap(),
    }
}

#[test]
fn fusing_identity_and_triple_identity_gives_double() {
    let eye = [1.0, 0.0, 0.0, 1.0];
    let experts = vec![
        affine_f64(&eye, &[2, 2], &[0.0, 0.0]),
        affine_f64(&eye.map(|v| 3.0 * v), &[2, 2], &[0.0, 0.0]),
    ];
    let fused = fuse(&experts, &[0.5, 0.5]).unwrap();
    assert_eq!(fused.weight.data(), &[2.0, 0.0, 0.0, 2.0]);
    assert_eq!(fused.bias.data(), &[0.0, 0.0]);
}

#[test]
fn one_hot_fusion_reproduces_that_expert() {
    let (store, layer) = layer_store::<f64>(&spec(FfnVariant::ExFusionSw, 4, true), 1);
    let experts = layer.up.values(&store);
    for j in 0..4 {
        let mut w = vec![0.0; 4];
        w[j] = 1.0;
        assert_eq!(fuse(&experts, &w).unwrap(), experts[j]);
    }
}

#[test]
fn fuse_rejects_bad_weights() {
    let (store, layer) = layer_store::<f64>(&spec(FfnVariant::ExFusionSw, 3, true), 2);
    let experts = layer.up.values(&store);
    assert!(matches!(fuse(&experts, &[0.5, 0.5]), Err(Error::Shape { .. })));
    assert!(matches!(fuse(&experts, &[0.5, f64::NAN, 0.0]), Err(Error::NonFinite(_))));
    assert!(matches!(fuse::<f64>(&[], &[]), Err(Error::Shape { .. })));
    let mixed = vec![experts[0].clone(), layer.down.values(&store)[0].clone()];
    assert!(matches!(fuse(&mixed, &[0.5, 0.5]), Err(Error::Shape { .. })));
}

fn fusion_identity_gap<T: Real>(seed: u64) -> f64 {
    let (store, layer) = layer_store::<T>(&spec(FfnVariant::ExFusionSw, 4, true), seed);
    let w: Vec<T> = random_tensor::<T>(seed + 1, &[4], 1.0).into_data();
    let x = random_tensor::<f64>(seed + 2, &[5, 8], 1.0);
    let xt: Tensor<T> = x.cast();
    let mut worst = 0.0f64;
    for set in [&layer.up, &layer.down] {
        let experts = set.values(&store);
        let inp = experts[0].weight.shape()[0];
        let x = if inp == 8 { xt.clone() } else { random_tensor::<T>(seed + 3, &[5, inp], 1.0) };
        let fused = fuse(&experts, &w).unwrap();
        let apply = |a: &Affine<T>| {
            let mut ctx = Ctx::new(&store, Mode::Eval);
            let xv = ctx.graph.constant(x.clone()).unwrap();
            let wv = ctx.graph.constant(a.weight.clone()).unwrap();
            let bv = ctx.graph.constant(a.bias.clone()).unwrap();
            let y = ctx.graph.matmul(xv, wv).unwrap();
            let y = ctx.graph.add(y, bv).unwrap();
            ctx.graph.value(y).clone()
        };
        let direct = apply(&fused);
        let outs: Vec<Tensor<T>> = experts.iter().map(apply).collect();
        for i in 0..direct.numel() {
            let combined: f64 = outs.iter().zip(&w).map(|(o, wi)| wi.as_f64() * o.data()[i].as_f64()).sum();
            worst = worst.max((direct.data()[i].as_f64() - combined).abs());
        }
    }
    worst
}

#[test]
fn parameter_fusion_equals_output_combination() {
    for seed in 0..10 {
        assert!(fusion_identity_gap::<f32>(seed) < 1e-5);
        assert!(fusion_identity_gap::<f64>(seed) < 1e-12);
    }
}

#[test]
fn scaling_the_weights_scales_the_fused_layer() {
    let (store, layer) = layer_store::<f64>(&spec(FfnVariant::ExFusionSw, 4, true), 3);
    let experts = layer.up.values(&store);
    let w = random_tensor::<f64>(4, &[4], 1.0).into_data();
    let x = random_tensor::<f64>(5, &[3, 8], 1.0);
    let base = apply_affine(x.data(), 3, &fuse(&experts, &w).unwrap());
    for c in [2.0, 0.5, -4.0] {
        let cw: Vec<f64> = w.iter().map(|v| c * v).collect();
        let scaled = apply_affine(x.data(), 3, &fuse(&experts, &cw).unwrap());
        for (s, b) in scaled.iter().zip(&base) {
            assert_eq!(*s, c * b);
        }
    }
    let cw: Vec<f64> = w.iter().map(|v| 0.3 * v).collect();
    let scaled = apply_affine(x.data(), 3, &fuse(&experts, &cw).unwrap());
    for (s, b) in scaled.iter().zip(&base) {
        assert!((s - 0.3 * b).abs() < 1e-12);
    }
}

fn expert_ffn(layer: &ExFusionLayer, e: usize) -> DenseFfnParams {
    DenseFfnParams {
        up: layer.up.experts[e],
        down: layer.down.experts[e],
    }
}

#[test]
fn single_expert_static_fusion_is_the_expert_ffn() {
    let (store, layer) = layer_store::<f64>(&spec(FfnVariant::ExFusionSw, 1, true), 6);
    let x = random_tensor(7, &[2, 3, 8], 1.0);
    let (y, _) = run(&store, Mode::Train, &x, |c, x| exfusion_sw_forward(c, x, &layer.up, &layer.down));
    let (e, _) = run(&store, Mode::Train, &x, |c, x| ffn_forward(c, x, &expert_ffn(&layer, 0)));
    assert!(y.bit_eq(&e));
}

fn make_identical(store: &mut ParamStore<f64>, layer: &ExFusionLayer) {
    for set in [&layer.up, &layer.down] {
        let first = set.experts[0];
        for l in &set.experts[1..] {
            let (w, b) = (store.value(first.weight).clone(), store.value(first.bias).clone());
            store.set(l.weight, w).unwrap();
            store.set(l.bias, b).unwrap();
        }
    }
}

#[test]
fn identical_experts_match_the_dense_ffn() {
    let (mut store, layer) = layer_store::<f64>(&spec(FfnVariant::ExFusionSw, 3, true), 8);
    make_identical(&mut store, &layer);
    let x = random_tensor(9, &[2, 3, 8], 1.0);
    let (y, _) = run(&store, Mode::Train, &x, |c, x| exfusion_sw_forward(c, x, &layer.up, &layer.down));
    let (e, _) = run(&store, Mode::Train, &x, |c, x| ffn_forward(c, x, &expert_ffn(&layer, 0)));
    assert!(y.max_abs_diff(&e).unwrap() < 1e-6);
}

#[test]
fn static_expert_gradients_are_a_fraction_of_the_dense_twin() {
    let n = 4;
    let (store, layer) = layer_store::<f64>(&spec(FfnVariant::ExFusionSw, n, true), 10);
    let x = random_tensor::<f64>(11, &[2, 3, 8], 1.0);
    let probe = random_tensor::<f64>(12, &[2, 3, 8], 1.0);
    let loss = |ctx: &mut Ctx<'_, f64>, y: Var| {
        let p = ctx.graph.constant(probe.clone()).unwrap();
        let yp = ctx.graph.mul(y, p).unwrap();
        ctx.graph.sum(yp).unwrap()
    };

    let mut ctx = Ctx::new(&store, Mode::Train);
    let xv = ctx.graph.constant(x.clone()).unwrap();
    let y = exfusion_sw_forward(&mut ctx, xv, &layer.up, &layer.down).unwrap();
    let l = loss(&mut ctx, y);
    ctx.backward(l).unwrap();
    let fused_grads = ctx.param_grads();

    let (up, down) = layer.fused(&store).unwrap();
    let mut twin = ParamStore::<f64>::new();
    let twin_ffn = DenseFfnParams {
        up: Linear {
            weight: twin.add("up.weight", up.weight, ParamKind::Weight).unwrap(),
            bias: twin.add("up.bias", up.bias, ParamKind::NoDecay).unwrap(),
        },
        down: Linear {
            weight: twin.add("down.weight", down.weight, ParamKind::Weight).unwrap(),
            bias: twin.add("down.bias", down.bias, ParamKind::NoDecay).unwrap(),
        },
    };
    let mut ctx = Ctx::new(&twin, Mode::Train);
    let xv = ctx.graph.constant(x).unwrap();
    let y = ffn_forward(&mut ctx, xv, &twin_ffn).unwrap();
    let l = loss(&mut ctx, y);
    ctx.backward(l).unwrap();
    let twin_grads = ctx.param_grads();

    let pairs = [
        (&layer.up, twin_ffn.up),
        (&layer.down, twin_ffn.down),
    ];
    for (set, dense) in pairs {
        for expert in &set.experts {
            for (e, d) in [(expert.weight, dense.weight), (expert.bias, dense.bias)] {
                let ge = fused_grads[e.index()].as_ref().unwrap();
                let gd = twin_grads[d.index()].as_ref().unwrap();
                let expected = Tensor::from_fn(gd.shape(), |i| gd.data()[i] / n as f64);
                assert!(ge.max_abs_diff(&expected).unwrap() < 1e-5);
            }
        }
    }
}

#[test]
fn dynamic_weights_at_init_match_static_fusion() {
    let (store, layer) = layer_store::<f32>(&spec(FfnVariant::ExFusionDw, 3, true), 13);
    let FusionState::Dynamic { weights } = layer.state else { unreachable!() };
    let x = random_tensor(14, &[2, 3, 8], 1.0);
    let (dw, _) = run(&store, Mode::Train, &x, |c, x| exfusion_dw_forward(c, x, &layer.up, &layer.down, weights));
    let (sw, _) = run(&store, Mode::Train, &x, |c, x| exfusion_sw_forward(c, x, &layer.up, &layer.down));
    assert!(dw.bit_eq(&sw));
}

#[test]
fn one_hot_dynamic_weights_select_one_expert_pair() {
    let (mut store, layer) = layer_store::<f64>(&spec(FfnVariant::ExFusionDw, 3, true), 15);
    let FusionState::Dynamic { weights } = layer.state else { unreachable!() };
    let x = random_tensor(16, &[2, 3, 8], 1.0);
    for j in 0..3 {
        store.set(weights, Tensor::from_fn(&[3], |i| if i == j { 1.0 } else { 0.0 })).unwrap();
        let (y, _) = run(&store, Mode::Train, &x, |c, x| exfusion_forward(c, x, &layer));
        let (e, _) = run(&store, Mode::Train, &x, |c, x| ffn_forward(c, x, &expert_ffn(&layer, j)));
        assert!(y.bit_eq(&e));
    }
}

struct Probe {
    layer: ExFusionLayer,
    x: Tensor<f64>,
    probe: Tensor<f64>,
}

impl StoreFn for Probe {
    fn eval<T: Real>(&self, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let x = ctx.graph.constant(self.x.cast())?;
        let y = exfusion_forward(ctx, x, &self.layer)?;
        let p = ctx.graph.constant(self.probe.cast())?;
        let yp = ctx.graph.mul(y, p)?;
        ctx.graph.sum(yp)
    }
}

#[test]
fn fusion_gradients_match_finite_differences() {
    let cases = [
        (FfnVariant::ExFusionSw, true, BankOrder::UpdateThenFuse),
        (FfnVariant::ExFusionDw, true, BankOrder::UpdateThenFuse),
        (FfnVariant::ExFusionMb, true, BankOrder::UpdateThenFuse),
        (FfnVariant::ExFusionMb, false, BankOrder::UpdateThenFuse),
        (FfnVariant::ExFusionMb, true, BankOrder::FuseThenUpdate),
    ];
    for (i, (variant, shared, order)) in cases.into_iter().enumerate() {
        let seed = 20 + i as u64;
        let spec = ModelSpec {
            bank_order: order,
            ..spec(variant, 3, shared)
        };
        let (mut store, layer) = layer_store::<f64>(&spec, seed);
        let banks: Vec<_> = store.ids().filter(|&id| store.entry(id).kind == ParamKind::Buffer).collect();
        for id in banks {
            store.set(id, Tensor::from_f64(&[3], &[0.1, 0.3, 0.2]).unwrap()).unwrap();
        }
        let f = Probe {
            layer,
            x: random_tensor(seed + 1, &[2, 3, 8], 1.0),
            probe: random_tensor(seed + 2, &[2, 3, 8], 1.0),
        };
        let r32 = check_store_gradients::<f32, _>(&f, &store, Mode::Train).unwrap();
        let r64 = check_store_gradients::<f64, _>(&f, &store, Mode::Train).unwrap();
        assert!(r32.max_rel_err < rel_tolerance(DType::F32), "{variant:?} {r32:?}");
        assert!(r64.max_rel_err < rel_tolerance(DType::F64), "{variant:?} {r64:?}");
    }
}

#[test]
fn zero_router_weights_are_uniform() {
    let (mut store, layer) = layer_store::<f64>(&spec(FfnVariant::ExFusionMb, 4, true), 30);
    let FusionState::MemoryBank(BankRouting::Shared { router, .. }) = &layer.state else { unreachable!() };
    for id in [router.linear.weight, router.linear.bias] {
        let shape = store.value(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let (w, _) = run(&store, Mode::Train, &random_tensor(31, &[2, 5, 8], 1.0), |c, x| {
        mb_router_weights(c, x, router)
    });
    assert!(w.data().iter().all(|&v| v == 0.25));
}

#[test]
fn router_weights_are_the_token_mean_of_softmax_rows() {
    let (store, layer) = layer_store::<f64>(&spec(FfnVariant::ExFusionMb, 4, true), 32);
    let FusionState::MemoryBank(BankRouting::Shared { router, .. }) = &layer.state else { unreachable!() };
    let single = random_tensor(33, &[1, 1, 8], 1.0);
    let (w, _) = run(&store, Mode::Train, &single, |c, x| mb_router_weights(c, x, router));
    let (g, _) = run(&store, Mode::Train, &single, |c, x| route(c, x, router));
    assert_eq!(w.data(), g.data());

    let x = random_tensor(34, &[3, 5, 8], 1.0);
    let (w, _) = run(&store, Mode::Train, &x, |c, x| mb_router_weights(c, x, router));
    assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let wr = store.value(router.linear.weight).data();
    let br = store.value(router.linear.bias).data();
    let mut mean = [0.0; 4];
    for t in 0..15 {
        let logits: Vec<f64> = (0..4)
            .map(|e| br[e] + (0..8).map(|i| x.data()[t * 8 + i] * wr[i * 4 + e]).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for e in 0..4 {
            mean[e] += logits[e].exp() / z / 15.0;
        }
    }
    for e in 0..4 {
        assert!((w.data()[e] - mean[e]).abs() < 1e-6);
    }
}

#[test]
fn bank_update_arithmetic() {
    let m = mb_update(&[0.0f64; 4], &[0.25; 4], 0.95).unwrap();
    for v in m {
        assert!((v - 0.0125).abs() < 1e-15);
    }
    let w = [0.1, 0.2, 0.3, 0.4];
    let mut m = vec![0.0f64; 4];
    for t in 1..=50 {
        m = mb_update(&m, &w, 0.95).unwrap();
        for i in 0..4 {
            assert!((m[i] - w[i] * (1.0 - 0.95f64.powi(t))).abs() < 1e-12);
        }
    }
    assert!(mb_update(&m, &w, 1.0).is_err());
    assert!(mb_update(&m, &w, -0.5).is_err());
    assert!(mb_update(&m, &w[..3], 0.5).is_err());
}

#[test]
fn incremental_bank_matches_closed_form_ema() {
    let delta = 0.9f64;
    let ws: Vec<Vec<f64>> = (0..40).map(|s| random_tensor::<f64>(s + 40, &[5], 1.0).into_data()).collect();
    let mut m = vec![0.0f64; 5];
    for (t, w) in ws.iter().enumerate() {
        m = mb_update(&m, w, delta).unwrap();
        for i in 0..5 {
            let closed: f64 = (0..=t)
                .map(|s| (1.0 - delta) * delta.powi((t - s) as i32) * ws[s][i])
                .sum();
            assert!((m[i] - closed).abs() < 1e-10);
        }
    }
}

proptest! {
    #[test]
    fn bank_stays_inside_the_simplex(
        logits in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..60),
        delta in 0.0f64..0.999,
    ) {
        let mut m = vec![0.0f64; 4];
        for (t, l) in logits.iter().enumerate() {
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            let w: Vec<f64> = l.iter().map(|v| v.exp() / z).collect();
            m = mb_update(&m, &w, delta).unwrap();
            prop_assert!(m.iter().all(|&v| v >= 0.0));
            let total: f64 = m.iter().sum();
            prop_assert!(total <= 1.0 + 1e-12);
            prop_assert!((total - (1.0 - delta.powi(t as i32 + 1))).abs() < 1e-9);
        }
    }
}

#[test]
fn first_training_step_fuses_with_the_attenuated_bank() {
    let n = 4;
    let (mut store, layer) = layer_store::<f64>(&spec(FfnVariant::ExFusionMb, n, true), 50);
    let FusionState::MemoryBank(BankRouting::Shared { router, bank }) = &layer.state else { unreachable!() };
    for id in [router.linear.weight, router.linear.bias] {
        let shape = store.value(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let x = random_tensor(51, &[2, 3, 8], 1.0);
    let (y, updates) = run(&store, Mode::Train, &x, |c, x| exfusion_forward(c, x, &layer));

    let m = mb_update(&[0.0; 4], &[0.25; 4], 0.95).unwrap();
    let up = fuse(&layer.up.values(&store), &m).unwrap();
    let down = fuse(&layer.down.values(&store), &m).unwrap();
    assert!(y.max_abs_diff(&ffn_oracle(&x, &up, &down)).unwrap() < 1e-12);
    assert_eq!(updates.len(), 1);
    assert_eq!(updates[0].0, *bank);
    assert_eq!(updates[0].1.data(), m.as_slice());
}

#[test]
fn fuse_then_update_uses_the_previous_bank() {
    let spec = ModelSpec {
        bank_order: BankOrder::FuseThenUpdate,
        ..spec(FfnVariant::ExFusionMb, 3, true)
    };
    let (mut store, layer) = layer_store::<f64>(&spec, 52);
    let FusionState::MemoryBank(BankRouting::Shared { bank, .. }) = &layer.state else { unreachable!() };
    store.set(*bank, Tensor::from_f64(&[3], &[0.2, 0.1, 0.4]).unwrap()).unwrap();
    let x = random_tensor(53, &[2, 3, 8], 1.0);
    let (train, updates) = run(&store, Mode::Train, &x, |c, x| exfusion_forward(c, x, &layer));
    let (eval, _) = run(&store, Mode::Eval, &x, |c, x| exfusion_forward(c, x, &layer));
    assert!(train.bit_eq(&eval));
    assert_eq!(updates.len(), 1);
    assert!(!updates[0].1.bit_eq(store.value(*bank)));
}

#[test]
fn eval_mode_is_stateless_and_skips_the_router() {
    for shared in [true, false] {
        let (mut store, layer) = layer_store::<f64>(&spec(FfnVariant::ExFusionMb, 3, shared), 54);
        let banks: Vec<_> = store.ids().filter(|&id| store.entry(id).kind == ParamKind::Buffer).collect();
        for id in banks {
            store.set(id, Tensor::from_f64(&[3], &[0.3, 0.2, 0.1]).unwrap()).unwrap();
        }
        let x = random_tensor(55, &[2, 3, 8], 1.0);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let xv = ctx.graph.constant(x.clone()).unwrap();
        let a = exfusion_forward(&mut ctx, xv, &layer).unwrap();
        let b = exfusion_forward(&mut ctx, xv, &layer).unwrap();
        assert!(ctx.graph.value(a).bit_eq(ctx.graph.value(b)));
        assert!(ctx.take_bank_updates().is_empty());
        let s = ctx.graph.sum(a).unwrap();
        ctx.backward(s).unwrap();
        let grads = ctx.param_grads();
        let routers: Vec<_> = store.ids().filter(|&id| store.entry(id).name.contains("router")).collect();
        assert!(!routers.is_empty());
        for id in routers {
            assert!(grads[id.index()].is_none());
        }
        let (up, down) = layer.fused(&store).unwrap();
        assert!(ctx.graph.value(a).max_abs_diff(&ffn_oracle(&x, &up, &down)).unwrap() < 1e-12);
    }
}

#[test]
fn bank_mass_telescopes() {
    for shared in [true, false] {
        let (mut store, layer) = layer_store::<f64>(&spec(FfnVariant::ExFusionMb, 4, shared), 56);
        for t in 1..=30 {
            let x = random_tensor(100 + t as u64, &[2, 3, 8], 1.0);
            let (_, updates) = run(&store, Mode::Train, &x, |c, x| exfusion_forward(c, x, &layer));
            assert_eq!(updates.len(), if shared { 1 } else { 2 });
            for (id, value) in updates {
                store.set(id, value).unwrap();
                let m = store.value(id).data();
                assert!(m.iter().all(|&v| v >= 0.0));
                let total: f64 = m.iter().sum();
                assert!((total - (1.0 - 0.95f64.powi(t))).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn collapse_keeps_the_dense_parameter_count() {
    for variant in [FfnVariant::Dense, FfnVariant::ExFusionSw, FfnVariant::ExFusionDw, FfnVariant::ExFusionMb] {
        for shared in [true, false] {
            let model = Transformer::<f32>::new(spec(variant, 4, shared)).unwrap();
            let dense = collapse_to_dense(&model).unwrap();
            assert_eq!(dense.spec.ffn_variant, FfnVariant::Dense);
            assert_eq!(dense.store.parameter_count(), model.spec.dense().param_count());
            assert_eq!(dense.store.buffer_count(), 0);
            assert!(dense.audit_params().ok());
        }
    }
    let topk = Transformer::<f32>::new(spec(FfnVariant::TopKMoe, 4, true)).unwrap();
    assert!(collapse_to_dense(&topk).is_err());
}

#[test]
fn static_collapse_is_the_expert_mean() {
    let model = Transformer::<f64>::new(spec(FfnVariant::ExFusionSw, 4, true)).unwrap();
    let dense = collapse_to_dense(&model).unwrap();
    for l in 0..2 {
        for part in ["up", "down"] {
            for leaf in ["weight", "bias"] {
                let got = dense.store.get(&format!("layers.{l}.ffn.{part}.{leaf}")).unwrap();
                let mean = Tensor::from_fn(got.shape(), |i| {
                    (0..4)
                        .map(|e| {
                            model.store.get(&format!("layers.{l}.ffn.{part}.experts.{e}.{leaf}")).unwrap().data()[i]
                        })
                        .sum::<f64>()
                        / 4.0
                });
                assert!(got.max_abs_diff(&mean).unwrap() < 1e-15);
            }
        }
    }
}

fn collapse_gap<T: Real>(variant: FfnVariant, shared: bool, seed: u64) -> f64 {
    let spec = ModelSpec {
        replaced_layers: if seed % 2 == 0 { LayerSet::All } else { LayerSet::Only([1].into()) },
        ..spec(variant, 4, shared)
    };
    let mut model = Transformer::<T>::new(spec).unwrap();
    randomize(&mut model, seed, 0.3);
    let dense = collapse_to_dense(&model).unwrap();
    (0..16)
        .map(|b| {
            let batch = random_batch(seed * 100 + b, 3, 6, 11);
            model.logits(&batch).unwrap().max_abs_diff(&dense.logits(&batch).unwrap()).unwrap()
        })
        .fold(0.0, f64::max)
}

#[test]
fn collapsed_model_reproduces_eval_logits() {
    for variant in [FfnVariant::ExFusionSw, FfnVariant::ExFusionDw, FfnVariant::ExFusionMb] {
        for (shared, seed) in [(true, 60), (false, 61)] {
            assert!(collapse_gap::<f32>(variant, shared, seed) < 1e-5);
            assert!(collapse_gap::<f64>(variant, shared, seed) < 1e-10);
        }
    }
}

#[test]
fn averaging_divides_variance() {
    let r = variance_reduction_demo(1, 2.0, 0.0, 20_000, 1).unwrap();
    assert!((r.empirical_var - 4.0).abs() < 0.2);
    assert_eq!(variance_reduction_demo(4, 1.0, 0.0, 1, 2).unwrap().predicted_var, 0.25);
    let trials = 100_000;
    let r = variance_reduction_demo(4, 1.0, 0.7, trials, 3).unwrap();
    assert!((r.empirical_var / 0.25 - 1.0).abs() < 0.05);
    assert!((r.empirical_mean - 0.7).abs() < 3.0 / (4.0 * trials as f64).sqrt());
    assert!(variance_reduction_demo(0, 1.0, 0.0, 10, 0).is_err());
}
