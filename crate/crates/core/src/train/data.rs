//! Desk-scale tasks: Gaussian-cluster sequence classification and
//! character-level language modeling over a bundled public-domain text.
//!
//! Every batch is a pure function of `(seed, step)`, so training can stop
//! and resume anywhere without carrying data-loader state.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::transformer::TokenBatch;

pub const CORPUS: &str = include_str!("../../assets/corpus.txt");

const CENTROID_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const ORDER_STREAM: u64 = 1 << 32;
const WINDOW_STREAM: u64 = 2 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    SyntheticCluster,
    CharLm,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SyntheticCluster => "synthetic_cluster",
            TaskKind::CharLm => "char_lm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [TaskKind::SyntheticCluster, TaskKind::CharLm]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Standard deviation of token noise around each cluster centroid.
    pub noise: f64,
    /// Tail fraction of the corpus held out for validation.
    pub val_fraction: f64,
    /// Upper bound on validation windows for the language-modeling task.
    pub val_windows: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::SyntheticCluster,
            seq_len: 16,
            batch_size: 64,
            seed: 0,
            num_classes: 4,
            train_size: 4096,
            val_size: 512,
            noise: 2.0,
            val_fraction: 0.1,
            val_windows: 64,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::config("seq_len", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        match self.kind {
            TaskKind::SyntheticCluster => {
                if self.num_classes < 2 {
                    return Err(Error::config("num_classes", "must be >= 2"));
                }
                if self.train_size < self.batch_size {
                    return Err(Error::config("train_size", "must be at least batch_size"));
                }
                if self.val_size == 0 {
                    return Err(Error::config("val_size", "must be >= 1"));
                }
                if !(self.noise.is_finite() && self.noise >= 0.0) {
                    return Err(Error::config("noise", "must be finite and non-negative"));
                }
            }
            TaskKind::CharLm => {
                if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
                    return Err(Error::config("val_fraction", "must lie in (0, 1)"));
                }
                if self.val_windows == 0 {
                    return Err(Error::config("val_windows", "must be >= 1"));
                }
                let (train, val) = corpus_split(self.val_fraction);
                if train <= self.seq_len + 1 || val < self.seq_len + 1 {
                    return Err(Error::config("seq_len", "too long for the corpus split"));
                }
            }
        }
        Ok(())
    }
}

/// Sorted distinct characters of the corpus.
pub fn corpus_alphabet() -> Vec<char> {
    let mut chars: Vec<char> = CORPUS.chars().collect();
    chars.sort_unstable();
    chars.dedup();
    chars
}

fn corpus_split(val_fraction: f64) -> (usize, usize) {
    let n = CORPUS.chars().count();
    let train = ((n as f64) * (1.0 - val_fraction)).floor() as usize;
    (train, n - train)
}

/// Input tokens with one target per sequence or per position.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ClusterData {
    pub centroids: Vec<Vec<f64>>,
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    train_size: usize,
}

impl ClusterData {
    pub fn train(&self) -> (&[Vec<usize>], &[usize]) {
        (&self.sequences[..self.train_size], &self.labels[..self.train_size])
    }

    pub fn val(&self) -> (&[Vec<usize>], &[usize]) {
        (&self.sequences[self.train_size..], &self.labels[self.train_size..])
    }
}

#[derive(Clone, Debug)]
pub struct CharData {
    pub alphabet: Vec<char>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug)]
pub enum TaskData {
    Cluster(ClusterData),
    Char(CharData),
}

#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    pub data: TaskData,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Task {
    /// `vocab_size` bounds the cluster task's tokens; the language-modeling
    /// vocabulary is fixed by the corpus.
    pub fn build(spec: &TaskSpec, vocab_size: usize) -> Result<Self> {
        spec.validate()?;
        let data = match spec.kind {
            TaskKind::SyntheticCluster => TaskData::Cluster(Self::clusters(spec, vocab_size)?),
            TaskKind::CharLm => {
                let alphabet = corpus_alphabet();
                let ids: Vec<usize> = CORPUS
                    .chars()
                    .map(|c| alphabet.binary_search(&c).expect("alphabet covers corpus"))
                    .collect();
                let (train, _) = corpus_split(spec.val_fraction);
                TaskData::Char(CharData {
                    alphabet,
                    val: ids[train..].to_vec(),
                    train: ids[..train].to_vec(),
                })
            }
        };
        Ok(Self {
            spec: spec.clone(),
            data,
        })
    }

    fn clusters(spec: &TaskSpec, vocab: usize) -> Result<ClusterData> {
        if vocab < 2 {
            return Err(Error::config("vocab_size", "must be >= 2"));
        }
        let top = (vocab - 1) as f64;
        let mut rng = stream_rng(spec.seed, CENTROID_STREAM);
        let centroids: Vec<Vec<f64>> = (0..spec.num_classes)
            .map(|_| (0..spec.seq_len).map(|_| rng.random_range(0.0..=top)).collect())
            .collect();
        let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config("noise", e.to_string()))?;
        let mut rng = stream_rng(spec.seed, SAMPLE_STREAM);
        // Each split holds every class equally often, up to rounding.
        let mut labels = Vec::with_capacity(spec.train_size + spec.val_size);
        for n in [spec.train_size, spec.val_size] {
            let mut split: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
            split.shuffle(&mut rng);
            labels.extend(split);
        }
        let mut sequences = Vec::with_capacity(labels.len());
        for &c in &labels {
            let seq = centroids[c]
                .iter()
                .map(|&mu| (mu + noise.sample(&mut rng)).round().clamp(0.0, top) as usize)
                .collect();
            sequences.push(seq);
        }
        Ok(ClusterData {
            centroids,
            sequences,
            labels,
            train_size: spec.train_size,
        })
    }

    pub fn vocab_size(&self) -> Option<usize> {
        match &self.data {
            TaskData::Cluster(_) => None,
            TaskData::Char(c) => Some(c.alphabet.len()),
        }
    }

    fn batches_per_epoch(&self) -> u64 {
        match &self.data {
            TaskData::Cluster(_) => (self.spec.train_size / self.spec.batch_size) as u64,
            TaskData::Char(c) => (c.train.len() / (self.spec.batch_size * self.spec.seq_len)).max(1) as u64,
        }
    }

    /// Epoch containing update `step` (0-based).
    pub fn epoch_of(&self, step: u64) -> u64 {
        step / self.batches_per_epoch()
    }

    /// Training batch consumed by update `step` (0-based).
    pub fn train_batch(&self, step: u64) -> Batch {
        let (b, l) = (self.spec.batch_size, self.spec.seq_len);
        match &self.data {
            TaskData::Cluster(d) => {
                let epoch = self.epoch_of(step);
                let within = (step % self.batches_per_epoch()) as usize;
                let mut order: Vec<usize> = (0..self.spec.train_size).collect();
                order.shuffle(&mut stream_rng(self.spec.seed, ORDER_STREAM + epoch));
                let picked = &order[within * b..(within + 1) * b];
                let tokens = picked.iter().flat_map(|&i| d.sequences[i].iter().copied()).collect();
                Batch {
                    tokens: TokenBatch::new(tokens, b, l).expect("batch shape"),
                    targets: picked.iter().map(|&i| d.labels[i]).collect(),
                }
            }
            TaskData::Char(d) => {
                let mut rng = stream_rng(self.spec.seed, WINDOW_STREAM + step);
                let mut tokens = Vec::with_capacity(b * l);
                let mut targets = Vec::with_capacity(b * l);
                for _ in 0..b {
                    let o = rng.random_range(0..d.train.len() - l);
                    tokens.extend_from_slice(&d.train[o..o + l]);
                    targets.extend_from_slice(&d.train[o + 1..o + l + 1]);
                }
                Batch {
                    tokens: TokenBatch::new(tokens, b, l).expect("batch shape"),
                    targets,
                }
            }
        }
    }

    /// The fixed validation set, in batches of at most `batch_size`.
    pub fn val_batches(&self) -> Vec<Batch> {
        let (b, l) = (self.spec.batch_size, self.spec.seq_len);
        match &self.data {
            TaskData::Cluster(d) => {
                let (seqs, labels) = d.val();
                seqs.chunks(b)
                    .zip(labels.chunks(b))
                    .map(|(s, y)| Batch {
                        tokens: TokenBatch::new(s.concat(), s.len(), l).expect("batch shape"),
                        targets: y.to_vec(),
                    })
                    .collect()
            }
            TaskData::Char(d) => {
                let windows = ((d.val.len() - 1) / l).min(self.spec.val_windows);
                let starts: Vec<usize> = (0..windows).map(|w| w * l).collect();
                starts
                    .chunks(b)
                    .map(|chunk| Batch {
                        tokens: TokenBatch::new(
                            chunk.iter().flat_map(|&o| d.val[o..o + l].iter().copied()).collect(),
                            chunk.len(),
                            l,
                        )
                        .expect("batch shape"),
                        targets: chunk.iter().flat_map(|&o| d.val[o + 1..o + l + 1].iter().copied()).collect(),
                    })
                    .collect()
            }
        }
    }
}
