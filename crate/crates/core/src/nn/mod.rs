//! Neural building blocks: normalization, rotary embeddings, QK-normed attention,
//! sandwich-normed residual sublayers and the factorized spatio-temporal block.

mod attention;
mod block;
mod layers;
mod params;
pub mod rope;

pub use attention::{cross_attention, spatial_attention, temporal_attention, Attention, AttentionSpec, TextBatch};
pub use block::{BlockContext, BlockShape, StivBlock};
pub use layers::{rms_norm, sandwich, stateless_layer_norm, Linear, Mlp, Modulation, MLP_RATIO, NORM_EPS};
pub use params::{Bound, Init, ParamBuilder, ParamId, ParamStore};
pub use rope::{rope_apply, Position, RopeAngles, RopeKind, RopeTable};
