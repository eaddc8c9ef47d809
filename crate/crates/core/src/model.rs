//! Token classifier wrapping the encoder: embedding lookup, sinusoidal
//! positions, encoder, and a linear head over the vocabulary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::encoder::{encoder_forward, sinusoidal_positions, DropoutState, Encoder, EncoderVars, ParamKind};
use crate::error::{Error, Result};
use crate::mask::{attention_mask, AttentionMask};
use crate::projection::{uniform, SharedProjection, SharedVars};
use crate::tasks::Batch;
use crate::tensor::{Scalar, Tensor};

const EMBED_SEED_SALT: u64 = 0xe3b0_c442;

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    pub embedding: Tensor<S>,
    pub encoder: Encoder<S>,
    pub head: SharedProjection<S>,
}

/// Borrowed view of one named parameter.
#[derive(Debug, Clone, Copy)]
pub struct NamedParam<'a, S> {
    pub kind: ParamKind,
    pub tensor: &'a Tensor<S>,
}

/// Graph handles for a bound model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embedding: Var,
    pub encoder: EncoderVars,
    pub head: SharedVars,
    /// All leaves, in [`Model::params`] order.
    pub leaves: Vec<Var>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.d_model;
        let encoder = Encoder::new(&config.encoder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.encoder.seed ^ EMBED_SEED_SALT);
        let embedding = uniform(&[config.vocab, d], 1.0, &mut rng);
        let head = SharedProjection::random(config.vocab, d, &mut rng);
        Ok(Self {
            config: config.clone(),
            embedding,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All trainable tensors with their names, in canonical order.
    pub fn params(&self) -> Vec<(String, NamedParam<'_, S>)> {
        let mut out = Vec::new();
        out.push(("embed.weight".to_string(), NamedParam { kind: ParamKind::Embedding, tensor: &self.embedding }));
        self.encoder.visit("encoder.", &mut |name, kind, tensor| {
            out.push((name, NamedParam { kind, tensor }));
        });
        out.push(("head.weight".to_string(), NamedParam { kind: ParamKind::Head, tensor: &self.head.weight }));
        out.push(("head.bias".to_string(), NamedParam { kind: ParamKind::Head, tensor: &self.head.bias }));
        out
    }

    /// Mutable tensors in [`Model::params`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.encoder.tensors_mut());
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.tensor.numel()).sum()
    }

    /// Creates one leaf per parameter; `trainable` decides `requires_grad`.
    pub fn bind(&self, g: &mut Graph<S>, trainable: impl Fn(ParamKind) -> bool) -> ModelVars {
        let leaves: Vec<Var> = self
            .params()
            .into_iter()
            .map(|(_, p)| g.leaf(p.tensor.clone(), trainable(p.kind)))
            .collect();
        self.bind_leaves(leaves)
    }

    /// Structures leaves that were created in [`Model::params`] order.
    pub fn bind_leaves(&self, leaves: Vec<Var>) -> ModelVars {
        let mut it = leaves.iter().copied();
        let embedding = it.next().expect("embedding leaf");
        let encoder = self.encoder.bind(&mut it);
        let head = SharedVars {
            weight: it.next().expect("head weight leaf"),
            bias: it.next().expect("head bias leaf"),
        };
        assert!(it.next().is_none(), "extra leaves");
        ModelVars { embedding, encoder, head, leaves }
    }

    /// Mask configured for sequences of length `seq`, if any.
    pub fn mask_for(&self, seq: usize) -> Option<AttentionMask> {
        self.config.encoder.mask.map(|m| attention_mask(seq, &m))
    }

    /// Logits `[batch*seq x vocab]` for token ids laid out sequence-major.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        vars: &ModelVars,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        dropout: Option<&mut DropoutState>,
    ) -> Result<Var> {
        if tokens.len() != batch * seq {
            return Err(Error::shape("forward tokens", &[tokens.len()], &[batch, seq]));
        }
        let d = self.config.encoder.d_model;
        let emb = g.embedding(vars.embedding, tokens)?;
        let pe = sinusoidal_positions::<S>(seq, d);
        let mut tiled = Vec::with_capacity(batch * seq * d);
        for _ in 0..batch {
            tiled.extend_from_slice(pe.data());
        }
        let pe = g.constant(Tensor::new(&[batch * seq, d], tiled)?);
        let x = g.add(emb, pe)?;
        let mask = self.mask_for(seq);
        let h = encoder_forward(g, &self.config.encoder, &vars.encoder, x, batch, seq, mask.as_ref(), dropout)?;
        let logits = g.matmul_nt(h, vars.head.weight)?;
        g.add_row(logits, vars.head.bias)
    }

    /// Mean per-token cross-entropy of a batch.
    pub fn loss(
        &self,
        g: &mut Graph<S>,
        vars: &ModelVars,
        batch: &Batch,
        dropout: Option<&mut DropoutState>,
    ) -> Result<Var> {
        let logits = self.forward(g, vars, &batch.inputs, batch.batch, batch.seq, dropout)?;
        g.cross_entropy(logits, &batch.targets)
    }

    /// Loss without recording gradients.
    pub fn eval_loss(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, |_| false);
        let loss = self.loss(&mut g, &vars, batch, None)?;
        Ok(g.value(loss).data()[0].to_f64_lossy())
    }

    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, |_| false);
        let out = self.forward(&mut g, &vars, tokens, batch, seq, None)?;
        Ok(g.value(out).clone())
    }

    /// Residual model initialized from this sharing-only one, with
    /// zero-effect adapters.
    pub fn with_adapters(&self, rank: usize, diag: bool, seed: u64) -> Result<Self> {
        let encoder = self.encoder.with_adapters(rank, diag, seed)?;
        let mut config = self.config.clone();
        config.encoder = encoder.config().clone();
        Ok(Self {
            config,
            embedding: self.embedding.clone(),
            encoder,
            head: self.head.clone(),
        })
    }

    /// Same function with every layer owning a copy of its group's weights.
    pub fn untied(&self) -> Self {
        let encoder = self.encoder.untied();
        let mut config = self.config.clone();
        config.encoder = encoder.config().clone();
        Self {
            config,
            embedding: self.embedding.clone(),
            encoder,
            head: self.head.clone(),
        }
    }

    /// Replaces every parameter with `values` given in [`Model::params`] order.
    pub fn load_tensors(&mut self, values: Vec<Tensor<S>>) -> Result<()> {
        let targets = self.tensors_mut();
        if targets.len() != values.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors, got {}",
                targets.len(),
                values.len()
            )));
        }
        for (t, v) in targets.into_iter().zip(values) {
            if t.shape() != v.shape() {
                return Err(Error::shape("load_tensors", t.shape(), v.shape()));
            }
            *t = v;
        }
        Ok(())
    }
}
