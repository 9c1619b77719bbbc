//! Small random models and batches shared by tests and verification suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::params::ParamKind;
use crate::tensor::{Real, Tensor};
use crate::transformer::{FfnVariant, Head, ModelSpec, TokenBatch, Transformer};

/// Depth 2, width 8, two heads, three experts.
pub fn tiny_spec(variant: FfnVariant) -> ModelSpec {
    ModelSpec {
        depth: 2,
        dim: 8,
        heads: 2,
        expansion: 2,
        vocab_size: 11,
        max_seq_len: 6,
        head: Head::Classifier { classes: 3 },
        ffn_variant: variant,
        num_experts: 3,
        top_k: 2,
        ..ModelSpec::default()
    }
}

pub fn random_tensor<T: Real>(seed: u64, shape: &[usize], std: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
}

pub fn random_batch(seed: u64, batch: usize, seq_len: usize, vocab: usize) -> TokenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..batch * seq_len).map(|_| rng.random_range(0..vocab)).collect();
    TokenBatch::new(tokens, batch, seq_len).expect("non-empty batch")
}

pub fn random_labels(seed: u64, n: usize, classes: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Replaces every value with fresh noise of scale `std`, so that biases,
/// norm parameters, fusion weights and banks are all non-trivial. Banks are
/// drawn as valid EMA states: non-negative with sum below one.
pub fn randomize<T: Real>(model: &mut Transformer<T>, seed: u64, std: f64) {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let entry = model.store.entry(id);
        let shape = entry.value.shape().to_vec();
        let sub = seed.wrapping_mul(0x9e37_79b9).wrapping_add(id.index() as u64);
        let value = match entry.kind {
            ParamKind::Buffer => {
                let mut rng = ChaCha8Rng::seed_from_u64(sub);
                let raw: Vec<f64> = (0..shape.iter().product()).map(|_| rng.random_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum::<f64>() / 0.9;
                Tensor::from_f64(&shape, &raw.iter().map(|v| v / total).collect::<Vec<_>>()).expect("bank shape")
            }
            ParamKind::FusionWeights => {
                let noise = random_tensor::<f64>(sub, &shape, std);
                let n = shape[0] as f64;
                Tensor::from_f64(&shape, &noise.data().iter().map(|v| 1.0 / n + v).collect::<Vec<_>>())
                    .expect("weights shape")
            }
            _ => random_tensor(sub, &shape, std),
        };
        model.store.set(id, value).expect("same shape");
    }
}
