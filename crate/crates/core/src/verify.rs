//! Property suites behind `exfusion verify`, run on small random instances
//! with fixed seeds.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exfusion::{collapse_to_dense, fuse, mb_update, variance_reduction_demo, Affine};
use crate::gradcheck::{check_model_gradients, rel_tolerance};
use crate::tensor::{DType, Real};
use crate::testing::{random_batch, random_labels, random_tensor, randomize, tiny_spec};
use crate::transformer::{FfnVariant, Head, ModelSpec, Transformer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Fusion,
    Gradients,
    Ema,
    Variance,
    Export,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [Suite::Fusion, Suite::Gradients, Suite::Ema, Suite::Variance, Suite::Export];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Fusion => "fusion",
            Suite::Gradients => "gradients",
            Suite::Ema => "ema",
            Suite::Variance => "variance",
            Suite::Export => "export",
            Suite::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::EACH.into_iter().chain([Suite::All]).find(|v| v.name() == s)
    }
}

/// One measured quantity against its bound; passes when `value < tolerance`.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(suite: Suite, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            suite: suite.name(),
            name: name.into(),
            value,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.value < self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "suite={} check={} value={:.3e} tol={:.1e} status={}",
            self.suite,
            self.name,
            self.value,
            self.tolerance,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

pub fn run(suite: Suite) -> Result<Vec<Check>> {
    match suite {
        Suite::Fusion => fusion_suite(200),
        Suite::Gradients => gradient_suite(5),
        Suite::Ema => ema_suite(10_000),
        Suite::Variance => variance_suite(100_000),
        Suite::Export => export_suite(16),
        Suite::All => {
            let mut out = Vec::new();
            for s in Suite::EACH {
                out.extend(run(s)?);
            }
            Ok(out)
        }
    }
}

fn apply<T: Real>(x: &[T], rows: usize, a: &Affine<T>) -> Vec<T> {
    let (inp, out) = (a.weight.shape()[0], a.weight.shape()[1]);
    let w = a.weight.data();
    let mut y = vec![T::zero(); rows * out];
    for r in 0..rows {
        for j in 0..out {
            let mut acc = a.bias.data()[j];
            for i in 0..inp {
                acc += x[r * inp + i] * w[i * out + j];
            }
            y[r * out + j] = acc;
        }
    }
    y
}

/// Largest gap between `x·(Σw_i W_i) + Σw_i b_i` and `Σ w_i (x·W_i + b_i)`.
pub fn fusion_identity_gap<T: Real>(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=8);
    let (inp, out, rows) = (rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=6));
    let experts: Vec<Affine<T>> = (0..n)
        .map(|e| Affine {
            weight: random_tensor(seed * 64 + 2 * e as u64, &[inp, out], 1.0),
            bias: random_tensor(seed * 64 + 2 * e as u64 + 1, &[out], 1.0),
        })
        .collect();
    let w: Vec<T> = random_tensor::<T>(seed * 64 + 40, &[n], 1.0).into_data();
    let x: Vec<T> = random_tensor::<T>(seed * 64 + 41, &[rows, inp], 1.0).into_data();
    let direct = apply(&x, rows, &fuse(&experts, &w)?);
    let outputs: Vec<Vec<T>> = experts.iter().map(|e| apply(&x, rows, e)).collect();
    let mut worst = 0.0f64;
    for (i, d) in direct.iter().enumerate() {
        let mut combined = T::zero();
        for (o, &wi) in outputs.iter().zip(&w) {
            combined += wi * o[i];
        }
        worst = worst.max((d.as_f64() - combined.as_f64()).abs());
    }
    Ok(worst)
}

pub fn fusion_suite(instances: u64) -> Result<Vec<Check>> {
    let mut gap32 = 0.0f64;
    let mut gap64 = 0.0f64;
    for seed in 0..instances {
        gap32 = gap32.max(fusion_identity_gap::<f32>(seed)?);
        gap64 = gap64.max(fusion_identity_gap::<f64>(seed)?);
    }
    Ok(vec![
        Check::new(Suite::Fusion, format!("identity_f32_n{instances}"), gap32, 1e-5),
        Check::new(Suite::Fusion, format!("identity_f64_n{instances}"), gap64, 1e-10),
    ])
}

/// Full-model finite-difference check on a depth-2, width-8 model.
pub fn model_gradient_error<T: Real>(variant: FfnVariant, lm: bool, seed: u64) -> Result<f64> {
    let mut spec = ModelSpec {
        seed,
        ..tiny_spec(variant)
    };
    let (b, l) = (2, 4);
    let targets = if lm {
        spec.head = Head::LanguageModel;
        random_labels(seed + 1, b * l, spec.vocab_size)
    } else {
        random_labels(seed + 1, b, 3)
    };
    let mut model = Transformer::<f64>::new(spec)?;
    randomize(&mut model, seed + 2, 0.3);
    let batch = random_batch(seed + 3, b, l, model.spec.vocab_size);
    Ok(check_model_gradients::<T>(&model, &batch, &targets)?.max_rel_err)
}

pub fn gradient_suite(seeds: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for variant in FfnVariant::ALL {
        let (mut e32, mut e64) = (0.0f64, 0.0f64);
        for seed in 0..seeds {
            let lm = seed % 2 == 1;
            e32 = e32.max(model_gradient_error::<f32>(variant, lm, seed)?);
            e64 = e64.max(model_gradient_error::<f64>(variant, lm, seed)?);
        }
        out.push(Check::new(Suite::Gradients, format!("{}_f32", variant.name()), e32, rel_tolerance(DType::F32)));
        out.push(Check::new(Suite::Gradients, format!("{}_f64", variant.name()), e64, rel_tolerance(DType::F64)));
    }
    Ok(out)
}

/// Incremental bank updates against `Σ_s (1-δ) δ^(t-s) w_s`, plus the bank
/// mass `1 - δ^t` for simplex inputs.
pub fn ema_suite(steps: usize) -> Result<Vec<Check>> {
    let (n, delta) = (4, 0.95f64);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ws: Vec<Vec<f64>> = (0..steps)
        .map(|_| {
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / z).collect()
        })
        .collect();
    let probes: Vec<usize> = [1, 2, 10, 100, 1000, steps / 2, steps]
        .into_iter()
        .chain((0..20).map(|_| rng.random_range(1..=steps)))
        .filter(|&t| t >= 1 && t <= steps)
        .collect();
    let mut m = vec![0.0f64; n];
    let (mut closed_gap, mut mass_gap) = (0.0f64, 0.0f64);
    for t in 1..=steps {
        m = mb_update(&m, &ws[t - 1], delta)?;
        let mass: f64 = m.iter().sum();
        mass_gap = mass_gap.max((mass - (1.0 - delta.powi(t as i32))).abs());
        if probes.contains(&t) {
            for i in 0..n {
                let closed: f64 = (1..=t)
                    .map(|s| (1.0 - delta) * delta.powi((t - s) as i32) * ws[s - 1][i])
                    .sum();
                closed_gap = closed_gap.max((m[i] - closed).abs());
            }
        }
    }
    Ok(vec![
        Check::new(Suite::Ema, format!("closed_form_t{steps}"), closed_gap, 1e-10),
        Check::new(Suite::Ema, format!("mass_t{steps}"), mass_gap, 1e-8),
    ])
}

/// For each `k`, the relative variance error (bound 5%) and the mean's
/// distance from the bias in standard errors (bound 4).
pub fn variance_suite(trials: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (i, k) in [1usize, 2, 4, 8].into_iter().enumerate() {
        let r = variance_reduction_demo(k, 1.0, 0.5, trials, 100 + i as u64)?;
        out.push(Check::new(
            Suite::Variance,
            format!("var_k{k}_pred{:.4}_emp{:.4}", r.predicted_var, r.empirical_var),
            (r.empirical_var / r.predicted_var - 1.0).abs(),
            0.05,
        ));
        let se = (r.predicted_var / trials as f64).sqrt();
        out.push(Check::new(
            Suite::Variance,
            format!("bias_k{k}"),
            (r.empirical_mean - r.bias).abs() / se,
            4.0,
        ));
    }
    Ok(out)
}

/// Max eval-logit gap between a randomized model and its collapse.
pub fn collapse_gap<T: Real>(variant: FfnVariant, shared: bool, seed: u64, batches: u64) -> Result<f64> {
    let spec = ModelSpec {
        num_experts: 4,
        shared_router: shared,
        seed,
        ..tiny_spec(variant)
    };
    let mut model = Transformer::<T>::new(spec)?;
    randomize(&mut model, seed, 0.3);
    let dense = collapse_to_dense(&model)?;
    if dense.store.parameter_count() != model.spec.dense().param_count() {
        return Err(Error::invalid("collapse", "parameter count differs from the dense baseline"));
    }
    let mut worst = 0.0f64;
    for b in 0..batches {
        let batch = random_batch(seed * 1000 + b, 3, 6, model.spec.vocab_size);
        worst = worst.max(model.logits(&batch)?.max_abs_diff(&dense.logits(&batch)?)?);
    }
    Ok(worst)
}

pub fn export_suite(batches: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for variant in [FfnVariant::ExFusionSw, FfnVariant::ExFusionDw, FfnVariant::ExFusionMb] {
        let (mut g32, mut g64) = (0.0f64, 0.0f64);
        for (seed, shared) in [(1, true), (2, false)] {
            g32 = g32.max(collapse_gap::<f32>(variant, shared, seed, batches)?);
            g64 = g64.max(collapse_gap::<f64>(variant, shared, seed, batches)?);
        }
        out.push(Check::new(Suite::Export, format!("{}_f32", variant.name()), g32, 1e-5));
        out.push(Check::new(Suite::Export, format!("{}_f64", variant.name()), g64, 1e-10));
    }
    Ok(out)
}
