//! Shared projections with per-layer low-rank plus diagonal residuals.
//!
//! Every linear map in a layer is evaluated as
//!
//! ```text
//! y = (U + A B + D) x + b
//! ```
//!
//! where `U` and `b` belong to the layer's sharing group, `A` (`out x R`)
//! and `B` (`R x in`) are the layer's own low-rank factors, and `D` is a
//! rectangular diagonal stored as its `min(out, in)` diagonal entries.
//! The forward path never forms `A B`: it computes `U x + A (B x) + D∘x`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{matmul_2d, Scalar, Tensor};

/// The six per-layer linear maps that carry shared + residual weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProjectionSite {
    Query,
    Key,
    Value,
    AttnOut,
    FfnIn,
    FfnOut,
}

impl ProjectionSite {
    pub const ALL: [ProjectionSite; 6] = [
        ProjectionSite::Query,
        ProjectionSite::Key,
        ProjectionSite::Value,
        ProjectionSite::AttnOut,
        ProjectionSite::FfnIn,
        ProjectionSite::FfnOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProjectionSite::Query => "query",
            ProjectionSite::Key => "key",
            ProjectionSite::Value => "value",
            ProjectionSite::AttnOut => "attn_out",
            ProjectionSite::FfnIn => "ffn_in",
            ProjectionSite::FfnOut => "ffn_out",
        }
    }

    /// `(out_dim, in_dim)` of this site.
    pub fn dims(self, d_model: usize, d_ff: usize) -> (usize, usize) {
        match self {
            ProjectionSite::FfnIn => (d_ff, d_model),
            ProjectionSite::FfnOut => (d_model, d_ff),
            _ => (d_model, d_model),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Group owning the weights of `layer` when every `share_every` consecutive
/// layers share: layers `0..K` use group 0, `K..2K` group 1, and so on.
pub fn group_index(layer: usize, share_every: usize) -> usize {
    assert!(share_every >= 1, "share_every must be >= 1");
    layer / share_every
}

/// Layer-to-group assignment for a whole encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    group_of: Vec<usize>,
    num_groups: usize,
}

impl GroupLayout {
    pub fn new(config: &EncoderConfig) -> Self {
        let (l, k) = (config.layers, config.share_every);
        let mut group_of: Vec<usize> = (0..l).map(|i| group_index(i, k)).collect();
        if config.unique_last_layer && l > 1 {
            let last_shared = l - 1;
            group_of[last_shared] = last_shared.div_ceil(k);
        }
        let num_groups = group_of.last().map_or(0, |g| g + 1);
        Self { group_of, num_groups }
    }

    pub fn group_of(&self, layer: usize) -> usize {
        self.group_of[layer]
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn num_layers(&self) -> usize {
        self.group_of.len()
    }

    /// Layers referencing `group`, in order.
    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.group_of.len())
            .filter(|&l| self.group_of[l] == group)
            .collect()
    }

    /// First layer of each group, where a streaming pass loads its weights.
    pub fn is_first_of_group(&self, layer: usize) -> bool {
        layer == 0 || self.group_of[layer - 1] != self.group_of[layer]
    }
}

/// Group-owned full-rank weight `U [out x in]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedProjection<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> SharedProjection<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        let (out, _) = matrix_dims(&weight, "shared weight")?;
        if bias.shape() != [out] {
            return Err(Error::shape("shared bias", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    /// Uniform `±1/sqrt(in)` weights, zero bias.
    pub fn random(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: uniform(&[out_dim, in_dim], bound, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Per-layer residual `A [out x R]`, `B [R x in]` and optional diagonal
/// `D [min(out, in)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualAdapter<S> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
    pub diag: Option<Tensor<S>>,
}

impl<S: Scalar> ResidualAdapter<S> {
    pub fn new(a: Tensor<S>, b: Tensor<S>, diag: Option<Tensor<S>>) -> Result<Self> {
        let (out, r) = matrix_dims(&a, "adapter A")?;
        let (r2, inp) = matrix_dims(&b, "adapter B")?;
        if r != r2 {
            return Err(Error::shape("adapter rank", a.shape(), b.shape()));
        }
        if r >= out.min(inp) {
            return Err(Error::InvalidConfig(format!(
                "adapter rank {r} must be < min({out}, {inp})"
            )));
        }
        if let Some(d) = &diag {
            if d.shape() != [out.min(inp)] {
                return Err(Error::shape("adapter diagonal", &[out, inp], d.shape()));
            }
        }
        Ok(Self { a, b, diag })
    }

    pub fn zeros(out_dim: usize, in_dim: usize, rank: usize, diag: bool) -> Self {
        Self {
            a: Tensor::zeros(&[out_dim, rank]),
            b: Tensor::zeros(&[rank, in_dim]),
            diag: diag.then(|| Tensor::zeros(&[out_dim.min(in_dim)])),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn has_diag(&self) -> bool {
        self.diag.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel() + self.diag.as_ref().map_or(0, Tensor::numel)
    }
}

/// Zero-effect initialization: `A ~ N(0, scale^2)`, `B = 0`, `D = 0`.
pub fn init_adapter<S: Scalar>(adapter: &mut ResidualAdapter<S>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if scale > 0.0 {
        let normal = Normal::new(0.0, scale).expect("finite std");
        for v in adapter.a.data_mut() {
            *v = S::from_f64_lossy(normal.sample(&mut rng));
        }
    } else {
        adapter.a.data_mut().fill(S::zero());
    }
    adapter.b.data_mut().fill(S::zero());
    if let Some(d) = adapter.diag.as_mut() {
        d.data_mut().fill(S::zero());
    }
}

/// Dense `A B + diag(D)`. Used only as a reference for the factored path.
pub fn materialize_delta<S: Scalar>(adapter: &ResidualAdapter<S>) -> Tensor<S> {
    let mut delta = adapter.a.matmul(&adapter.b).expect("adapter factors compose");
    if let Some(d) = &adapter.diag {
        let cols = adapter.in_dim();
        for (i, &v) in d.data().iter().enumerate() {
            delta.data_mut()[i * cols + i] += v;
        }
    }
    delta
}

/// Multiply-accumulate tally for the op-count instrumentation mode.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MacCounter {
    pub macs: u64,
}

/// Eager `(U + A B + D) x + b` for `x [.. x in]` without forming `A B`.
pub fn effective_apply<S: Scalar>(
    shared: &SharedProjection<S>,
    adapter: Option<&ResidualAdapter<S>>,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    effective_apply_counted(shared, adapter, x, &mut MacCounter::default())
}

/// [`effective_apply`] that also tallies multiply-accumulates.
pub fn effective_apply_counted<S: Scalar>(
    shared: &SharedProjection<S>,
    adapter: Option<&ResidualAdapter<S>>,
    x: &Tensor<S>,
    counter: &mut MacCounter,
) -> Result<Tensor<S>> {
    let (out, inp) = (shared.out_dim(), shared.in_dim());
    if x.cols() != inp {
        return Err(Error::shape("effective_apply", shared.weight.shape(), x.shape()));
    }
    if let Some(ad) = adapter {
        if ad.out_dim() != out || ad.in_dim() != inp {
            return Err(Error::shape("effective_apply adapter", shared.weight.shape(), &[ad.out_dim(), ad.in_dim()]));
        }
    }
    let rows = x.rows();
    let x2 = x.clone().reshape(&[rows, inp])?;
    let mut y = matmul_2d(&x2, false, &shared.weight, true)?;
    counter.macs += (rows * out * inp) as u64;

    if let Some(ad) = adapter {
        let r = ad.rank();
        let bx = matmul_2d(&x2, false, &ad.b, true)?;
        let abx = matmul_2d(&bx, false, &ad.a, true)?;
        counter.macs += (rows * r * (inp + out)) as u64;
        y.add_assign(&abx)?;
        if let Some(d) = &ad.diag {
            let k = d.numel();
            for row in 0..rows {
                for i in 0..k {
                    y.data_mut()[row * out + i] += d.data()[i] * x2.data()[row * inp + i];
                }
            }
            counter.macs += (rows * k) as u64;
        }
    }
    for row in y.data_mut().chunks_mut(out) {
        for (v, &b) in row.iter_mut().zip(shared.bias.data()) {
            *v += b;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    y.reshape(&shape)
}

/// Graph handles for a [`SharedProjection`].
#[derive(Debug, Clone, Copy)]
pub struct SharedVars {
    pub weight: Var,
    pub bias: Var,
}

/// Graph handles for a [`ResidualAdapter`].
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
    pub diag: Option<Var>,
}

/// Differentiable counterpart of [`effective_apply`] for `x [rows x in]`.
///
/// Terms are summed in a fixed order (`U x`, `A (B x)`, `D∘x`, bias) so a
/// zero adapter yields the shared-only result bit for bit.
pub fn apply_on_graph<S: Scalar>(
    g: &mut Graph<S>,
    shared: SharedVars,
    adapter: Option<AdapterVars>,
    x: Var,
) -> Result<Var> {
    let mut y = g.matmul_nt(x, shared.weight)?;
    if let Some(ad) = adapter {
        let bx = g.matmul_nt(x, ad.b)?;
        let abx = g.matmul_nt(bx, ad.a)?;
        y = g.add(y, abx)?;
        if let Some(d) = ad.diag {
            let out = g.shape(y)[1];
            let dx = g.diag_embed(x, d, out)?;
            y = g.add(y, dx)?;
        }
    }
    g.add_row(y, shared.bias)
}

fn matrix_dims<S: Scalar>(t: &Tensor<S>, what: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(what, s, &[0, 0])),
    }
}

pub(crate) fn uniform<S: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    // drawn as f32 so models built at either precision start from the same values
    let data = (0..n)
        .map(|_| S::from_f64_lossy(f64::from(rng.random_range(-bound..bound) as f32)))
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}
