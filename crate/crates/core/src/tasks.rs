//! Synthetic sequence labelling tasks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// `y[t] = x[t]`.
    Copy,
    /// `y[t] = x[T-1-t]`.
    Reverse,
    /// `y[t]` = parity of the number of odd tokens in `x[..=t]`.
    ParityTag,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "parity" | "parity-tag" => Ok(TaskKind::ParityTag),
            other => Err(Error::InvalidConfig(format!("unknown task '{other}'"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ParityTag => "parity-tag",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub vocab: usize,
    pub length: usize,
}

/// `batch` sequences of `seq` tokens, stored sequence-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl ToyTask {
    pub fn new(kind: TaskKind, vocab: usize, length: usize) -> Result<Self> {
        if vocab < 2 || length == 0 {
            return Err(Error::InvalidConfig(format!(
                "task needs vocab >= 2 and length >= 1 (got {vocab}, {length})"
            )));
        }
        Ok(Self { kind, vocab, length })
    }

    pub fn labels(&self, inputs: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => inputs.to_vec(),
            TaskKind::Reverse => inputs.iter().rev().copied().collect(),
            TaskKind::ParityTag => inputs
                .iter()
                .scan(0usize, |acc, &x| {
                    *acc ^= x & 1;
                    Some(*acc)
                })
                .collect(),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, batch: usize) -> Batch {
        let mut inputs = Vec::with_capacity(batch * self.length);
        let mut targets = Vec::with_capacity(batch * self.length);
        for _ in 0..batch {
            let seq: Vec<usize> = (0..self.length).map(|_| rng.random_range(0..self.vocab)).collect();
            targets.extend(self.labels(&seq));
            inputs.extend(seq);
        }
        Batch {
            inputs,
            targets,
            batch,
            seq: self.length,
        }
    }

    /// Deterministic stream of training batches.
    pub fn stream(&self, seed: u64) -> TaskStream {
        TaskStream {
            task: *self,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Held-out batch drawn from a stream disjoint from training seeds.
    pub fn eval_batch(&self, seed: u64, size: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1_0000_0000_0000);
        self.sample(&mut rng, size)
    }
}

pub struct TaskStream {
    task: ToyTask,
    rng: ChaCha8Rng,
}

impl TaskStream {
    pub fn next_batch(&mut self, batch: usize) -> Batch {
        self.task.sample(&mut self.rng, batch)
    }
}
