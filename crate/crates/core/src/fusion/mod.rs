//! Temporal fusion heads: per-frame token embeddings in, one clip feature out.

mod attention;
mod config;
mod head;
mod lstm;
mod params;
mod tcn;

pub use config::{FusionHeadConfig, FusionKind, Pool, TokenReduce};
pub use head::{frame_descriptors, Fused, FusionHead};
pub use params::{Param, ParamSet};
pub use tcn::receptive_field;

pub(crate) use params::{Init, Linear};
