use crate::error::Result;
use crate::tensor::{Real, Var};

use super::attention::{
    cross_attention, spatial_attention, temporal_attention, Attention, AttentionSpec, TextBatch,
};
use super::layers::{sandwich, Mlp, Modulation};
use super::params::{Bound, ParamBuilder};
use super::rope::RopeAngles;

/// One STIV block: spatial self-attention, temporal self-attention, text
/// cross-attention and feed-forward, each a sandwich-normed residual.
///
/// Only the spatial attention and feed-forward sublayers receive the shared
/// scale-shift-gate; the temporal and cross sublayers use fixed identity modulation
/// and start with zero output projections.
#[derive(Clone, Copy, Debug)]
pub struct StivBlock {
    pub spatial: Attention,
    pub temporal: Option<Attention>,
    pub cross: Attention,
    pub mlp: Mlp,
}

pub struct BlockShape {
    pub dim: usize,
    pub text_dim: usize,
    pub n_heads: usize,
    pub temporal: bool,
    pub causal_temporal: bool,
}

/// Per-forward inputs shared by every block.
pub struct BlockContext<'a, 't, E: Real> {
    pub attn_mod: &'a Modulation<'t, E>,
    pub mlp_mod: &'a Modulation<'t, E>,
    pub text: &'a TextBatch<'t, E>,
    pub spatial_rope: &'a RopeAngles<E>,
    pub temporal_rope: &'a RopeAngles<E>,
}

impl StivBlock {
    pub fn new<E: Real>(pb: &mut ParamBuilder<'_, E>, shape: &BlockShape) -> Result<Self> {
        let spatial = Attention::new(
            &mut pb.sub("spatial_attn"),
            AttentionSpec {
                dim: shape.dim,
                kv_dim: shape.dim,
                n_heads: shape.n_heads,
                causal: false,
                zero_out: false,
            },
        )?;
        let temporal = if shape.temporal {
            Some(Self::new_temporal(pb, shape)?)
        } else {
            None
        };
        let cross = Attention::new(
            &mut pb.sub("cross_attn"),
            AttentionSpec {
                dim: shape.dim,
                kv_dim: shape.text_dim,
                n_heads: shape.n_heads,
                causal: false,
                zero_out: true,
            },
        )?;
        let mlp = Mlp::new(&mut pb.sub("mlp"), shape.dim);
        Ok(Self {
            spatial,
            temporal,
            cross,
            mlp,
        })
    }

    /// Temporal attention with a zero output projection.
    pub fn new_temporal<E: Real>(pb: &mut ParamBuilder<'_, E>, shape: &BlockShape) -> Result<Attention> {
        Attention::new(
            &mut pb.sub("temporal_attn"),
            AttentionSpec {
                dim: shape.dim,
                kv_dim: shape.dim,
                n_heads: shape.n_heads,
                causal: shape.causal_temporal,
                zero_out: true,
            },
        )
    }

    /// `x` is `[B, T, S, D]`.
    pub fn forward<'t, E: Real>(
        &self,
        p: &Bound<'t, E>,
        x: &Var<'t, E>,
        ctx: &BlockContext<'_, 't, E>,
    ) -> Result<Var<'t, E>> {
        let mut x = sandwich(x, Some(ctx.attn_mod), |h| {
            spatial_attention(&self.spatial, p, h, ctx.spatial_rope)
        })?;
        if let Some(temporal) = &self.temporal {
            x = sandwich(&x, None, |h| temporal_attention(temporal, p, h, ctx.temporal_rope))?;
        }
        let x = sandwich(&x, None, |h| cross_attention(&self.cross, p, h, ctx.text))?;
        sandwich(&x, Some(ctx.mlp_mod), |h| self.mlp.forward(p, h))
    }
}
