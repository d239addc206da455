//! Rational-quadratic spline coupling flows: density evaluation, sampling and
//! maximum-likelihood training.

mod checkpoint;
mod coupling;
mod mlp;
mod model;
mod spline;
mod train;

pub use checkpoint::{decode_f64s, encode_f64s, Checkpoint, FORMAT_VERSION};
pub use coupling::{alternating_mask, CouplingLayer};
pub use mlp::{Mlp, MlpCache};
pub use model::{FlowArch, FlowModel, Standardizer};
pub use spline::{
    raw_param_count, spline_apply, Direction, SplineParams, DEFAULT_BINS, DEFAULT_TAIL_BOUND,
};
pub use train::{
    fit, loss_and_gradient, mean_nll, split_dataset, EpochStats, SplitData, TrainConfig,
    TrainReport, TrainState, Trainer,
};
