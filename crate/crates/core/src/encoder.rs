//! Pre-norm Transformer encoder with grouped shared projections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::{Activation, EncoderConfig};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::projection::{
    apply_on_graph, init_adapter, AdapterVars, GroupLayout, ProjectionSite, ResidualAdapter,
    SharedProjection, SharedVars,
};
use crate::tensor::{Scalar, Tensor};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
/// Std of the random `A` factor at initialization.
pub const ADAPTER_INIT_SCALE: f64 = 0.02;
const ADAPTER_SEED_SALT: u64 = 0x5eed_ad47;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<S> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: Tensor::full(&[dim], S::one()),
            bias: Tensor::zeros(&[dim]),
        }
    }
}

/// One layer's own parameters. Its projections live in the group it
/// points at.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<S> {
    pub group: usize,
    /// One adapter per [`ProjectionSite`], absent when rank is zero.
    pub adapters: Option<Vec<ResidualAdapter<S>>>,
    pub norm_attn: LayerNormParams<S>,
    pub norm_ffn: LayerNormParams<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<S> {
    config: EncoderConfig,
    layout: GroupLayout,
    /// `groups[g][site]`.
    groups: Vec<Vec<SharedProjection<S>>>,
    layers: Vec<EncoderLayer<S>>,
    final_norm: LayerNormParams<S>,
}

/// Kind of a trainable tensor, for reporting and selective freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    Embedding,
    SharedWeight,
    SharedBias,
    AdapterA,
    AdapterB,
    AdapterDiag,
    Norm,
    Head,
}

impl<S: Scalar> Encoder<S> {
    /// Builds `ceil(L/K)` shared weight sets and `L` layers wired to them.
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let layout = GroupLayout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let groups = (0..layout.num_groups())
            .map(|_| {
                ProjectionSite::ALL
                    .iter()
                    .map(|s| {
                        let (out, inp) = s.dims(config.d_model, config.d_ff);
                        SharedProjection::random(out, inp, &mut rng)
                    })
                    .collect()
            })
            .collect();
        let layers = (0..config.layers)
            .map(|l| EncoderLayer {
                group: layout.group_of(l),
                adapters: config.has_adapters().then(|| new_adapters(config, l)),
                norm_attn: LayerNormParams::identity(config.d_model),
                norm_ffn: LayerNormParams::identity(config.d_model),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout,
            groups,
            layers,
            final_norm: LayerNormParams::identity(config.d_model),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, g: usize) -> &[SharedProjection<S>] {
        &self.groups[g]
    }

    pub fn group_mut(&mut self, g: usize) -> &mut [SharedProjection<S>] {
        &mut self.groups[g]
    }

    pub fn layers(&self) -> &[EncoderLayer<S>] {
        &self.layers
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut EncoderLayer<S> {
        &mut self.layers[l]
    }

    /// Shared projection used by `layer` at `site`.
    pub fn shared_for(&self, layer: usize, site: ProjectionSite) -> &SharedProjection<S> {
        &self.groups[self.layers[layer].group][site.index()]
    }

    pub fn final_norm(&self) -> &LayerNormParams<S> {
        &self.final_norm
    }

    /// Same function with every layer owning a private copy of its group's
    /// weights (`K = 1`).
    pub fn untied(&self) -> Self {
        let mut config = self.config.clone();
        config.share_every = 1;
        config.unique_last_layer = false;
        let layout = GroupLayout::new(&config);
        let groups = self.layers.iter().map(|l| self.groups[l.group].clone()).collect();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| EncoderLayer { group: i, ..l.clone() })
            .collect();
        Self {
            config,
            layout,
            groups,
            layers,
            final_norm: self.final_norm.clone(),
        }
    }

    /// Adds zero-effect adapters of `rank` to a sharing-only encoder.
    pub fn with_adapters(&self, rank: usize, diag: bool, seed: u64) -> Result<Self> {
        if self.config.has_adapters() {
            return Err(Error::InvalidConfig("encoder already has adapters".into()));
        }
        let mut config = self.config.clone();
        config.rank = rank;
        config.diag = diag;
        config.seed = seed;
        config.validate()?;
        let mut out = self.clone();
        out.config = config;
        for (l, layer) in out.layers.iter_mut().enumerate() {
            layer.adapters = (rank > 0).then(|| new_adapters(&out.config, l));
        }
        Ok(out)
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<S>)) {
        for (g, sites) in self.groups.iter().enumerate() {
            for (site, p) in ProjectionSite::ALL.iter().zip(sites) {
                f(format!("{prefix}group{g}.{}.weight", site.name()), ParamKind::SharedWeight, &p.weight);
                f(format!("{prefix}group{g}.{}.bias", site.name()), ParamKind::SharedBias, &p.bias);
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(ads) = &layer.adapters {
                for (site, ad) in ProjectionSite::ALL.iter().zip(ads) {
                    f(format!("{prefix}layer{l}.{}.a", site.name()), ParamKind::AdapterA, &ad.a);
                    f(format!("{prefix}layer{l}.{}.b", site.name()), ParamKind::AdapterB, &ad.b);
                    if let Some(d) = &ad.diag {
                        f(format!("{prefix}layer{l}.{}.diag", site.name()), ParamKind::AdapterDiag, d);
                    }
                }
            }
            f(format!("{prefix}layer{l}.norm_attn.gain"), ParamKind::Norm, &layer.norm_attn.gain);
            f(format!("{prefix}layer{l}.norm_attn.bias"), ParamKind::Norm, &layer.norm_attn.bias);
            f(format!("{prefix}layer{l}.norm_ffn.gain"), ParamKind::Norm, &layer.norm_ffn.gain);
            f(format!("{prefix}layer{l}.norm_ffn.bias"), ParamKind::Norm, &layer.norm_ffn.bias);
        }
        f(format!("{prefix}final_norm.gain"), ParamKind::Norm, &self.final_norm.gain);
        f(format!("{prefix}final_norm.bias"), ParamKind::Norm, &self.final_norm.bias);
    }

    /// Mutable tensors in the same order as [`Encoder::visit`].
    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for sites in &mut self.groups {
            for p in sites {
                out.push(&mut p.weight);
                out.push(&mut p.bias);
            }
        }
        for layer in &mut self.layers {
            if let Some(ads) = &mut layer.adapters {
                for ad in ads {
                    out.push(&mut ad.a);
                    out.push(&mut ad.b);
                    if let Some(d) = &mut ad.diag {
                        out.push(d);
                    }
                }
            }
            out.push(&mut layer.norm_attn.gain);
            out.push(&mut layer.norm_attn.bias);
            out.push(&mut layer.norm_ffn.gain);
            out.push(&mut layer.norm_ffn.bias);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out
    }

    /// Maps leaves created in [`Encoder::visit`] order onto the structure.
    pub(crate) fn bind(&self, leaves: &mut impl Iterator<Item = Var>) -> EncoderVars {
        let mut next = || leaves.next().expect("one leaf per encoder tensor");
        let groups = self
            .groups
            .iter()
            .map(|sites| {
                sites
                    .iter()
                    .map(|_| SharedVars { weight: next(), bias: next() })
                    .collect()
            })
            .collect();
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let adapters = layer.adapters.as_ref().map(|ads| {
                    ads.iter()
                        .map(|ad| AdapterVars {
                            a: next(),
                            b: next(),
                            diag: ad.diag.as_ref().map(|_| next()),
                        })
                        .collect()
                });
                LayerVars {
                    group: layer.group,
                    adapters,
                    norm_attn: NormVars { gain: next(), bias: next() },
                    norm_ffn: NormVars { gain: next(), bias: next() },
                }
            })
            .collect();
        EncoderVars {
            groups,
            layers,
            final_norm: NormVars { gain: next(), bias: next() },
        }
    }

    /// Eager forward of `x [T x d_model]`.
    pub fn forward(&self, x: &Tensor<S>, mask: Option<&AttentionMask>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let mut leaves = Vec::new();
        self.visit("", &mut |_, _, t| leaves.push(t.clone()));
        let leaves: Vec<Var> = leaves.into_iter().map(|t| g.constant(t)).collect();
        let vars = self.bind(&mut leaves.into_iter());
        let xv = g.constant(x.clone());
        let seq = x.shape()[0];
        let y = encoder_forward(&mut g, &self.config, &vars, xv, 1, seq, mask, None)?;
        Ok(g.value(y).clone())
    }
}

fn new_adapters<S: Scalar>(config: &EncoderConfig, layer: usize) -> Vec<ResidualAdapter<S>> {
    ProjectionSite::ALL
        .iter()
        .map(|s| {
            let (out, inp) = s.dims(config.d_model, config.d_ff);
            let mut ad = ResidualAdapter::zeros(out, inp, config.rank, config.diag);
            let seed = config
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                ^ ADAPTER_SEED_SALT
                ^ ((layer as u64) << 8 | s.index() as u64);
            init_adapter(&mut ad, seed, ADAPTER_INIT_SCALE);
            ad
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub group: usize,
    pub adapters: Option<Vec<AdapterVars>>,
    pub norm_attn: NormVars,
    pub norm_ffn: NormVars,
}

/// Graph handles for every encoder tensor.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub groups: Vec<Vec<SharedVars>>,
    pub layers: Vec<LayerVars>,
    pub final_norm: NormVars,
}

impl EncoderVars {
    fn project<S: Scalar>(&self, g: &mut Graph<S>, layer: usize, site: ProjectionSite, x: Var) -> Result<Var> {
        let lv = &self.layers[layer];
        let shared = self.groups[lv.group][site.index()];
        let adapter = lv.adapters.as_ref().map(|a| a[site.index()]);
        apply_on_graph(g, shared, adapter, x)
    }
}

/// Per-layer dropout streams.
pub struct DropoutState {
    rate: f64,
    rngs: Vec<ChaCha8Rng>,
}

impl DropoutState {
    pub fn new(config: &EncoderConfig) -> Self {
        let rngs = (0..config.layers)
            .map(|l| ChaCha8Rng::seed_from_u64(config.seed ^ 0xd409_0000 ^ l as u64))
            .collect();
        Self { rate: config.dropout, rngs }
    }
}

/// Multi-head scaled dot-product self-attention of layer `layer` over
/// `batch` sequences of length `seq` stacked in `x [batch*seq x d_model]`.
#[allow(clippy::too_many_arguments)]
pub fn mha_forward<S: Scalar>(
    g: &mut Graph<S>,
    config: &EncoderConfig,
    vars: &EncoderVars,
    layer: usize,
    x: Var,
    batch: usize,
    seq: usize,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let d = config.d_model;
    if g.shape(x) != [batch * seq, d] {
        return Err(Error::shape("mha_forward", g.shape(x), &[batch * seq, d]));
    }
    if let Some(m) = mask {
        if m.len() != seq {
            return Err(Error::shape("attention mask", &[m.len(), m.len()], &[seq, seq]));
        }
    }
    let flags = mask.map(AttentionMask::flags);
    let dh = config.head_dim();
    let scale = S::from_f64_lossy(1.0 / (dh as f64).sqrt());

    let q = vars.project(g, layer, ProjectionSite::Query, x)?;
    let k = vars.project(g, layer, ProjectionSite::Key, x)?;
    let v = vars.project(g, layer, ProjectionSite::Value, x)?;

    let mut rows = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let qh = g.slice(q, b * seq, seq, h * dh, dh)?;
            let kh = g.slice(k, b * seq, seq, h * dh, dh)?;
            let vh = g.slice(v, b * seq, seq, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(scores, scale);
            if let Some(f) = &flags {
                scores = g.mask_fill(scores, f.clone())?;
            }
            let p = g.softmax_rows(scores);
            heads.push(g.matmul(p, vh)?);
        }
        rows.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
    }
    let ctx = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    vars.project(g, layer, ProjectionSite::AttnOut, ctx)
}

/// Applies all layers, then the final norm, to `x [batch*seq x d_model]`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward<S: Scalar>(
    g: &mut Graph<S>,
    config: &EncoderConfig,
    vars: &EncoderVars,
    x: Var,
    batch: usize,
    seq: usize,
    mask: Option<&AttentionMask>,
    mut dropout: Option<&mut DropoutState>,
) -> Result<Var> {
    let mut h = x;
    for l in 0..config.layers {
        let lv = &vars.layers[l];
        let a = g.layer_norm(h, lv.norm_attn.gain, lv.norm_attn.bias, LAYER_NORM_EPS)?;
        let mut att = mha_forward(g, config, vars, l, a, batch, seq, mask)?;
        if let Some(state) = dropout.as_deref_mut() {
            att = g.dropout(att, state.rate, &mut state.rngs[l]);
        }
        h = g.add(h, att)?;

        let f = g.layer_norm(h, lv.norm_ffn.gain, lv.norm_ffn.bias, LAYER_NORM_EPS)?;
        let f = vars.project(g, l, ProjectionSite::FfnIn, f)?;
        let f = match config.activation {
            Activation::Relu => g.relu(f),
            Activation::Gelu => g.gelu(f),
        };
        let mut f = vars.project(g, l, ProjectionSite::FfnOut, f)?;
        if let Some(state) = dropout.as_deref_mut() {
            f = g.dropout(f, state.rate, &mut state.rngs[l]);
        }
        h = g.add(h, f)?;
    }
    g.layer_norm(h, vars.final_norm.gain, vars.final_norm.bias, LAYER_NORM_EPS)
}

/// Absolute sinusoidal position table `[seq x d]`.
pub fn sinusoidal_positions<S: Scalar>(seq: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(seq * d);
    for pos in 0..seq {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            data.push(S::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[seq, d], data).expect("positions shape")
}
