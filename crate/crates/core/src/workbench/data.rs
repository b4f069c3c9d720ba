//! Synthetic integer-token tasks and length-bucketed batching.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MptError, Result};
use crate::model::{tokens, Batch};
use crate::training::BatchSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    SortDigits,
}

impl std::str::FromStr for TaskKind {
    type Err = MptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort_digits" | "sort" => Ok(TaskKind::SortDigits),
            other => Err(MptError::Config(format!(
                "unknown task {other:?}; expected copy, reverse or sort_digits"
            ))),
        }
    }
}

fn default_test_seed() -> u64 {
    1
}
fn default_held_out() -> usize {
    200
}
fn default_bucket_width() -> usize {
    2
}

/// A source/target transduction over content ids `3..vocab`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTask {
    pub kind: TaskKind,
    /// Total vocabulary including the reserved ids 0-2.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default)]
    pub train_seed: u64,
    #[serde(default = "default_test_seed")]
    pub test_seed: u64,
    /// Size of the held-out evaluation set.
    #[serde(default = "default_held_out")]
    pub held_out: usize,
    /// Source lengths mixed within one batch.
    #[serde(default = "default_bucket_width")]
    pub bucket_width: usize,
}

/// One source/target pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl ToyTask {
    pub fn new(kind: TaskKind, vocab: usize, min_len: usize, max_len: usize) -> Self {
        ToyTask {
            kind,
            vocab,
            min_len,
            max_len,
            train_seed: 0,
            test_seed: default_test_seed(),
            held_out: default_held_out(),
            bucket_width: default_bucket_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab <= tokens::FIRST_CONTENT {
            return Err(MptError::schema(
                "task.vocab",
                format!("must exceed the {} reserved ids", tokens::FIRST_CONTENT),
            ));
        }
        if self.min_len == 0 {
            return Err(MptError::schema("task.min_len", "must be at least 1"));
        }
        if self.max_len < self.min_len {
            return Err(MptError::schema("task.max_len", "must be at least min_len"));
        }
        if self.bucket_width == 0 {
            return Err(MptError::schema("task.bucket_width", "must be at least 1"));
        }
        if self.train_seed == self.test_seed {
            return Err(MptError::schema("task.test_seed", "must differ from train_seed"));
        }
        Ok(())
    }

    pub fn target(&self, src: &[usize]) -> Vec<usize> {
        let mut t = src.to_vec();
        match self.kind {
            TaskKind::Copy => {}
            TaskKind::Reverse => t.reverse(),
            TaskKind::SortDigits => t.sort_unstable(),
        }
        t
    }

    fn sample_src(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
        (0..len).map(|_| rng.gen_range(tokens::FIRST_CONTENT..self.vocab)).collect()
    }

    /// Distinct held-out examples drawn from the test stream. Returns fewer
    /// than `held_out` only when the task space is smaller than that.
    pub fn held_out_set(&self) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.test_seed);
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(self.held_out);
        let mut attempts = 0;
        while out.len() < self.held_out && attempts < 50 * self.held_out.max(1) {
            attempts += 1;
            let len = rng.gen_range(self.min_len..=self.max_len);
            let src = self.sample_src(&mut rng, len);
            if seen.insert(src.clone()) {
                out.push(Example {
                    tgt: self.target(&src),
                    src,
                });
            }
        }
        out
    }

    /// Training batches from the train stream, never containing a held-out source.
    pub fn train_stream(&self, tokens_per_batch: usize) -> Result<TrainStream> {
        self.validate()?;
        let excluded = self.held_out_set().into_iter().map(|e| e.src).collect();
        Ok(TrainStream {
            task: self.clone(),
            rng: ChaCha8Rng::seed_from_u64(self.train_seed),
            excluded,
            tokens_per_batch: tokens_per_batch.max(1),
        })
    }
}

/// Endless deterministic source of training batches for one task.
#[derive(Clone, Debug)]
pub struct TrainStream {
    task: ToyTask,
    rng: ChaCha8Rng,
    excluded: HashSet<Vec<usize>>,
    tokens_per_batch: usize,
}

impl TrainStream {
    fn draw(&mut self, len: usize) -> Result<Vec<usize>> {
        for _ in 0..10_000 {
            let src = self.task.sample_src(&mut self.rng, len);
            if !self.excluded.contains(&src) {
                return Ok(src);
            }
        }
        Err(MptError::Config(format!(
            "every length-{len} source is held out; enlarge the task or shrink task.held_out"
        )))
    }

    /// Sources whose lengths lie within one bucket, up to the token budget
    /// (at least one sequence).
    pub fn next_batch(&mut self) -> Result<Batch> {
        let t = &self.task;
        let lo = self.rng.gen_range(t.min_len..=t.max_len);
        let hi = (lo + t.bucket_width - 1).min(t.max_len);
        let mut batch = Batch::default();
        let mut used = 0;
        loop {
            let len = self.rng.gen_range(lo..=hi);
            if !batch.is_empty() && used + len > self.tokens_per_batch {
                break;
            }
            let src = self.draw(len)?;
            used += len;
            batch.tgt.push(self.task.target(&src));
            batch.src.push(src);
        }
        Ok(batch)
    }
}

impl BatchSource for TrainStream {
    fn batches(&mut self, _step: usize, count: usize) -> Result<Vec<Batch>> {
        (0..count).map(|_| self.next_batch()).collect()
    }
}

/// Right-pads `seqs` with PAD to a common length; the mask is `true` on real tokens.
pub fn pad(seqs: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut ids = s.clone();
            ids.resize(width, tokens::PAD);
            let mask = (0..width).map(|i| i < s.len()).collect();
            (ids, mask)
        })
        .unzip()
}
