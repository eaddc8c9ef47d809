//! Chunk-wise attention masks for streaming encoders.

use std::sync::Arc;

use crate::config::ChunkMaskSpec;

/// Boolean `T x T` matrix; `allows(i, j)` means query `i` may attend key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Arc<[bool]>,
}

impl AttentionMask {
    /// Every position attends every position.
    pub fn full(len: usize) -> Self {
        Self {
            len,
            allowed: vec![true; len * len].into(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.len + j]
    }

    /// Row-major flags, shared cheaply with graph nodes.
    pub fn flags(&self) -> Arc<[bool]> {
        Arc::clone(&self.allowed)
    }

    /// Allowed key range `[lo, hi)` of query row `i`.
    pub fn row_range(&self, i: usize) -> (usize, usize) {
        let row = &self.allowed[i * self.len..(i + 1) * self.len];
        let lo = row.iter().position(|&b| b).unwrap_or(0);
        let hi = row.iter().rposition(|&b| b).map_or(0, |p| p + 1);
        (lo, hi)
    }
}

/// Query `i` in chunk `c = i / chunk` may attend `j` iff
/// `c*chunk - history <= j < (c+1)*chunk + lookahead`, clipped to `[0, T)`.
pub fn attention_mask(len: usize, spec: &ChunkMaskSpec) -> AttentionMask {
    assert!(len >= 1, "sequence length must be >= 1");
    assert!(spec.chunk >= 1, "chunk must be >= 1");
    let mut allowed = vec![false; len * len];
    for i in 0..len {
        let start = (i / spec.chunk) * spec.chunk;
        let lo = start.saturating_sub(spec.history);
        let hi = (start + spec.chunk + spec.lookahead).min(len);
        allowed[i * len + lo..i * len + hi].fill(true);
    }
    AttentionMask {
        len,
        allowed: allowed.into(),
    }
}
