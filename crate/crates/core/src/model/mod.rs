//! The STIV velocity network and its inputs.

pub mod condition;
pub mod config;
pub mod count;
pub mod latent;
pub mod mask;
pub mod patch;
pub mod singleton;
pub mod stiv;
pub mod text;

pub use condition::{Condition, ImageCondition, TextCondition};
pub use config::{MaskAxis, StivConfig};
pub use count::ParamCount;
pub use latent::{MicroConditions, PixelVideo, ToyCodec, VideoLatent, LATENT_CHANNELS};
pub use mask::TokenMask;
pub use patch::{patchify, unpatchify, PatchGrid};
pub use singleton::{sinusoid, SharedAdaLn, SingletonEmbedder, SingletonInput};
pub use stiv::{Layout, ModelInput, StivModel};
