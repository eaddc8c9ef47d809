use crate::error::{Error, Result};

/// Feed-forward nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Gelu),
            _ => None,
        }
    }
}

/// Chunk-wise streaming attention mask, in frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkMaskSpec {
    pub chunk: usize,
    pub history: usize,
    pub lookahead: usize,
}

impl ChunkMaskSpec {
    pub fn new(chunk: usize, history: usize, lookahead: usize) -> Result<Self> {
        if chunk == 0 {
            return Err(Error::InvalidConfig("mask chunk must be >= 1".into()));
        }
        Ok(Self { chunk, history, lookahead })
    }
}

/// Every structural knob of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    /// Number of consecutive layers sharing one set of projection weights.
    pub share_every: usize,
    /// Residual adapter rank; 0 disables adapters entirely.
    pub rank: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Whether adapters carry the rectangular-diagonal term.
    pub diag: bool,
    /// Gives the final layer its own weights instead of its group's.
    pub unique_last_layer: bool,
    pub mask: Option<ChunkMaskSpec>,
    pub activation: Activation,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl EncoderConfig {
    /// 18 layers, 512-dim attention with 8 heads, 2048-dim feed-forward,
    /// no sharing and no adapters.
    pub fn full_scale() -> Self {
        Self {
            layers: 18,
            share_every: 1,
            rank: 0,
            d_model: 512,
            d_ff: 2048,
            heads: 8,
            diag: true,
            unique_last_layer: false,
            mask: None,
            activation: Activation::Relu,
            dropout: 0.0,
            seed: 0,
        }
    }

    /// Small configuration convenient for tests and examples.
    pub fn tiny() -> Self {
        Self {
            layers: 4,
            share_every: 2,
            rank: 2,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            ..Self::full_scale()
        }
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    pub fn with_sharing(mut self, share_every: usize) -> Self {
        self.share_every = share_every;
        self
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn with_diag(mut self, diag: bool) -> Self {
        self.diag = diag;
        self
    }

    pub fn with_dims(mut self, d_model: usize, d_ff: usize, heads: usize) -> Self {
        self.d_model = d_model;
        self.d_ff = d_ff;
        self.heads = heads;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if self.share_every == 0 || self.share_every > self.layers {
            return fail(format!(
                "share_every must satisfy 1 <= K <= L (K={}, L={})",
                self.share_every, self.layers
            ));
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return fail("d_model and d_ff must be >= 1".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model ({}) must be divisible by heads ({})",
                self.d_model, self.heads
            ));
        }
        let min_dim = self.d_model.min(self.d_ff);
        if self.rank >= min_dim {
            return fail(format!(
                "rank must be < min(d_model, d_ff) = {min_dim}, got {}",
                self.rank
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if let Some(m) = self.mask {
            if m.chunk == 0 {
                return fail("mask chunk must be >= 1".into());
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn has_adapters(&self) -> bool {
        self.rank > 0
    }
}

/// Encoder plus the token embedding and classifier used on toy tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab: usize,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, vocab: usize) -> Self {
        Self { encoder, vocab }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::InvalidConfig(format!("vocab must be >= 2, got {}", self.vocab)));
        }
        self.encoder.validate()
    }

    /// Names of structural fields that differ. Seeds, dropout and masks are
    /// runtime choices and never count as a mismatch.
    pub fn structural_diff(&self, other: &ModelConfig) -> Vec<String> {
        let (a, b) = (&self.encoder, &other.encoder);
        let mut out = Vec::new();
        let mut cmp = |name: &str, x: String, y: String| {
            if x != y {
                out.push(format!("{name} ({x} vs {y})"));
            }
        };
        cmp("vocab", self.vocab.to_string(), other.vocab.to_string());
        cmp("layers", a.layers.to_string(), b.layers.to_string());
        cmp("share_every", a.share_every.to_string(), b.share_every.to_string());
        cmp("rank", a.rank.to_string(), b.rank.to_string());
        cmp("d_model", a.d_model.to_string(), b.d_model.to_string());
        cmp("d_ff", a.d_ff.to_string(), b.d_ff.to_string());
        cmp("heads", a.heads.to_string(), b.heads.to_string());
        cmp("diag", a.diag.to_string(), b.diag.to_string());
        cmp(
            "unique_last_layer",
            a.unique_last_layer.to_string(),
            b.unique_last_layer.to_string(),
        );
        cmp("activation", format!("{:?}", a.activation), format!("{:?}", b.activation));
        out
    }
}
