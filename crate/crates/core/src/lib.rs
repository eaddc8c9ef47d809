//! Transformer encoders whose projection weights are shared across groups
//! of consecutive layers, with a small per-layer residual `A B + D` on top
//! of each shared matrix.
//!
//! The crate carries everything needed to build, train and measure such
//! encoders at desk scale:
//!
//! * [`Graph`]: a tape-based reverse-mode autodiff over dense [`Tensor`]s,
//!   checked by [`finite_diff_check`].
//! * [`projection`]: shared projections, residual adapters and the
//!   factored `(U + A B + D) x + b` evaluation.
//! * [`Encoder`] and [`Model`]: a pre-norm encoder with chunk-wise
//!   streaming masks, plus the embedding/classifier wrapper used on toy
//!   tasks.
//! * [`train()`] and [`two_stage`]: Adam with warmup and linear decay, and
//!   the sharing-only then residual training pipeline.
//! * [`count_params`], [`simulate_load`] and [`Checkpoint`]: parameter
//!   accounting, the weight-loading model, and the on-disk format.
//!
//! ```
//! use residual_transformer::{count_params, format_millions, EncoderConfig};
//!
//! let cfg = EncoderConfig::full_scale().with_sharing(3).with_rank(16);
//! let c = count_params(&cfg);
//! assert_eq!(c.shared_total, 18_902_016);
//! assert_eq!(c.residual_total, 2_709_504);
//! assert_eq!(format_millions(c.transformer_total()), "21.6M");
//! ```

pub mod accounting;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod loadsim;
pub mod mask;
pub mod model;
pub mod optim;
pub mod projection;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod trend;

pub use accounting::{count_params, format_millions, sweep_tables, ParamCount};
pub use autograd::{Graph, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Activation, ChunkMaskSpec, EncoderConfig, ModelConfig};
pub use encoder::{Encoder, ParamKind};
pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use loadsim::{simulate_load, LoadReport};
pub use mask::{attention_mask, AttentionMask};
pub use model::Model;
pub use optim::{adam_step, lr_at, AdamConfig, AdamState};
pub use projection::{
    effective_apply, group_index, init_adapter, materialize_delta, ProjectionSite, ResidualAdapter,
    SharedProjection,
};
pub use tasks::{Batch, TaskKind, ToyTask};
pub use tensor::{Scalar, Tensor};
pub use train::{train, two_stage, TrainConfig, TrainOutcome};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/weight-structure.md")]
    mod weight_structure {}
    #[doc = include_str!("../../../book/src/grouping-and-loading.md")]
    mod grouping_and_loading {}
    #[doc = include_str!("../../../book/src/accounting.md")]
    mod accounting {}
    #[doc = include_str!("../../../book/src/streaming-masks.md")]
    mod streaming_masks {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
}
