//! Step-time comparison of every FFN variant at one model spec.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::train::Trainer;
use crate::transformer::FfnVariant;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: FfnVariant,
    pub top_k: usize,
    pub median_ms: f64,
    /// Median step time over the dense median.
    pub relative: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `steps` training updates per variant after `warmup` untimed ones.
/// Variants take turns step by step so slow drift in machine load hits
/// all of them alike. Top-k MoE runs with `k = 1`.
pub fn bench<T: Real>(config: &RunConfig, warmup: usize, steps: usize) -> Result<Vec<BenchRow>> {
    if steps == 0 {
        return Err(Error::Usage("bench needs at least one timed step".into()));
    }
    let mut trainers = FfnVariant::ALL
        .into_iter()
        .map(|variant| {
            let mut cfg = config.clone();
            cfg.model.ffn_variant = variant;
            cfg.model.top_k = 1;
            cfg.train.freeze_fusion_weights = false;
            cfg.train.total_steps = (warmup + steps) as u64;
            cfg.train.warmup_steps = cfg.train.warmup_steps.min(cfg.train.total_steps);
            cfg.resolve(true)?;
            Trainer::<T>::new(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut times = vec![Vec::with_capacity(steps); trainers.len()];
    for i in 0..warmup + steps {
        for (t, trainer) in trainers.iter_mut().enumerate() {
            let r = trainer.train_step()?;
            if i >= warmup {
                times[t].push(r.millis);
            }
        }
    }
    let medians: Vec<f64> = times.into_iter().map(median).collect();
    let dense = medians[0];
    Ok(trainers
        .iter()
        .zip(medians)
        .map(|(t, m)| BenchRow {
            variant: t.model.spec.ffn_variant,
            top_k: t.model.spec.top_k,
            median_ms: m,
            relative: m / dense,
        })
        .collect())
}

pub fn format_table(rows: &[BenchRow], num_experts: usize) -> String {
    let mut s = String::from("variant            experts  median_ms  relative\n");
    for r in rows {
        let label = match r.variant {
            FfnVariant::TopKMoe => format!("topk_moe(k={})", r.top_k),
            v => v.name().to_string(),
        };
        let n = if r.variant == FfnVariant::Dense { 1 } else { num_experts };
        let _ = writeln!(s, "{label:<18} {n:>7} {:>10.3}  x{:.2}", r.median_ms, r.relative);
    }
    s
}
