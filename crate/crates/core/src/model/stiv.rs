use std::rc::Rc;

use crate::error::{shape_err, Result, StivError};
use crate::nn::rope::{frame_positions, grid_positions};
use crate::nn::{
    stateless_layer_norm, BlockContext, BlockShape, Bound, Init, Linear, ParamBuilder, ParamId, ParamStore, RopeAngles,
    RopeKind, RopeTable, StivBlock, TextBatch,
};
use crate::tensor::{Real, RngState, Tape, Tensor, Var};

use super::config::{MaskAxis, StivConfig};
use super::latent::MicroConditions;
use super::mask::TokenMask;
use super::patch::{patchify, unpatchify, PatchGrid};
use super::singleton::{SharedAdaLn, SingletonEmbedder, SingletonInput};

/// Parameter handles of the network; a pure function of the config.
#[derive(Clone, Debug)]
pub struct Layout {
    pub text_table: ParamId,
    pub patch_embed: Linear,
    pub singleton: SingletonEmbedder,
    pub adaln: SharedAdaLn,
    pub blocks: Vec<StivBlock>,
    pub mask_token: ParamId,
    pub decoder: Vec<StivBlock>,
    pub head: Linear,
}

impl Layout {
    fn build<E: Real>(config: &StivConfig, pb: &mut ParamBuilder<'_, E>) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let shape = BlockShape {
            dim: d,
            text_dim: config.text_dim,
            n_heads: config.n_heads,
            temporal: config.temporal,
            causal_temporal: config.causal_temporal,
        };
        let text_table = pb.param("text_embed", &[config.vocab_size, config.text_dim], Init::Normal(1.0));
        let patch_embed = Linear::new(&mut pb.sub("patch_embed"), config.patch_dim(), d, Init::Xavier);
        let singleton = SingletonEmbedder::new(&mut pb.sub("singleton"), config.freq_dim, d, config.text_dim);
        let adaln = SharedAdaLn::new(&mut pb.sub("adaln"), d);
        let blocks = (0..config.n_blocks)
            .map(|i| StivBlock::new(&mut pb.sub(&format!("blocks.{i}")), &shape))
            .collect::<Result<Vec<_>>>()?;
        let mask_token = pb.param("mask_token", &[d], Init::Normal(0.02));
        let decoder = (0..config.n_decoder_blocks)
            .map(|i| StivBlock::new(&mut pb.sub(&format!("decoder.{i}")), &shape))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut pb.sub("head"), d, config.patch_dim(), Init::Zeros);
        Ok(Self {
            text_table,
            patch_embed,
            singleton,
            adaln,
            blocks,
            mask_token,
            decoder,
            head,
        })
    }
}

/// One batch of model inputs. `x` is `[B, T, H, W, C]`; the rest hold one entry per
/// sample. Token lists are caption ids, `[NULL_TOKEN]` for the empty prompt.
#[derive(Clone, Debug)]
pub struct ModelInput<E> {
    pub x: Tensor<E>,
    pub t: Vec<f64>,
    pub micro: Vec<MicroConditions>,
    pub tokens: Vec<Vec<usize>>,
}

impl<E: Real> ModelInput<E> {
    pub fn batch(&self) -> usize {
        self.x.shape().first().copied().unwrap_or(0)
    }
}

/// The velocity network `F(x_t, c_T, c_I, t)`.
#[derive(Clone, Debug)]
pub struct StivModel<E> {
    pub config: StivConfig,
    pub params: ParamStore<E>,
    pub layout: Layout,
}

impl<E: Real> StivModel<E> {
    pub fn new(config: StivConfig, rng: &mut RngState) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut ParamBuilder::new(&mut params, rng))?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Adopts an existing parameter set, which must match the config's names and
    /// shapes exactly.
    pub fn from_params(config: StivConfig, params: ParamStore<E>) -> Result<Self> {
        let mut expected = ParamStore::<E>::new();
        let layout = Layout::build(&config, &mut ParamBuilder::new(&mut expected, &mut RngState::new(0)))?;
        for (name, t) in expected.iter() {
            let got = params.by_name(name).ok_or_else(|| StivError::Incompatible {
                name: name.to_string(),
                detail: "missing".into(),
            })?;
            if got.shape() != t.shape() {
                return Err(StivError::Incompatible {
                    name: name.to_string(),
                    detail: format!("shape {:?}, expected {:?}", got.shape(), t.shape()),
                });
            }
        }
        if let Some(extra) = params.names().iter().find(|n| expected.id(n).is_none()) {
            return Err(StivError::Incompatible {
                name: extra.clone(),
                detail: "not part of this architecture".into(),
            });
        }
        // Reorder into layout order so ids resolve.
        for name in expected.names().to_vec() {
            expected.set(&name, params.by_name(&name).unwrap().clone())?;
        }
        Ok(Self {
            config,
            params: expected,
            layout,
        })
    }

    /// Returns a model with a different config over the same tensors, e.g. after
    /// changing the mask ratio or rope scales.
    pub fn with_config(&self, config: StivConfig) -> Result<Self> {
        Self::from_params(config, self.params.clone())
    }

    pub fn cast<F: Real>(&self) -> StivModel<F> {
        StivModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_input(&self, input: &ModelInput<E>) -> Result<PatchGrid> {
        let c = &self.config;
        let grid = PatchGrid::new(input.x.shape(), c.spatial_patch, c.temporal_patch)?;
        if grid.channels != c.channels {
            return shape_err("forward", format!("{} latent channels, model expects {}", grid.channels, c.channels));
        }
        let b = grid.batch;
        if b == 0 || input.t.len() != b || input.micro.len() != b || input.tokens.len() != b {
            return shape_err(
                "forward",
                format!(
                    "batch {b} with {} timesteps, {} micro conditions, {} captions",
                    input.t.len(),
                    input.micro.len(),
                    input.tokens.len()
                ),
            );
        }
        for ids in &input.tokens {
            if ids.is_empty() || ids.iter().any(|&i| i >= c.vocab_size) {
                return Err(StivError::Invalid(format!("caption ids {ids:?} outside vocabulary")));
            }
        }
        Ok(grid)
    }

    /// Text token embeddings `[L, D_text]` and pooled vector `[1, D_text]` (the last
    /// token's embedding).
    pub fn embed_text<'t>(&self, p: &Bound<'t, E>, ids: &[usize]) -> Result<(Var<'t, E>, Var<'t, E>)> {
        let seq = p.get(self.layout.text_table).index_select(0, Rc::new(vec![ids.to_vec()]))?;
        let pooled = seq.index_select(0, Rc::new(vec![vec![ids.len() - 1]]))?;
        Ok((seq, pooled))
    }

    fn spatial_rope(&self, grid: &PatchGrid, kept: Option<&[Vec<usize>]>) -> Result<RopeAngles<E>> {
        let table = RopeTable::new(RopeKind::Spatial2d, self.config.head_dim())?.with_scale(self.config.spatial_rope_scale);
        let all: Vec<usize> = (0..grid.sites()).collect();
        match kept {
            Some(lists) => table.angles(&lists.iter().map(|k| grid_positions(k, grid.cols)).collect::<Vec<_>>()),
            None => table.angles(&[grid_positions(&all, grid.cols)]),
        }
    }

    fn temporal_rope(&self, grid: &PatchGrid, kept: Option<&[Vec<usize>]>) -> Result<RopeAngles<E>> {
        let table =
            RopeTable::new(RopeKind::Temporal1d, self.config.head_dim())?.with_scale(self.config.temporal_rope_scale);
        match kept {
            Some(lists) => table.angles(
                &lists
                    .iter()
                    .map(|k| k.iter().map(|&f| crate::nn::Position::Frame(f as f64)).collect())
                    .collect::<Vec<_>>(),
            ),
            None => table.angles(&[frame_positions(grid.frames)]),
        }
    }

    /// Velocity prediction with the same shape as `input.x`. With `mask`, the main
    /// blocks see only the kept tokens and the mask token fills the rest before the
    /// decoder blocks; a mask that keeps everything takes the unmasked path.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, E>,
        input: &ModelInput<E>,
        mask: Option<&TokenMask>,
    ) -> Result<Var<'t, E>> {
        let grid = self.check_input(input)?;
        let tape = p.get(self.layout.text_table).tape();
        let lay = &self.layout;
        let x = tape.constant(input.x.clone());
        let tokens = lay.patch_embed.forward(p, &patchify(&x, &grid)?)?;

        let mut seqs = Vec::with_capacity(grid.batch);
        let mut pooled = Vec::with_capacity(grid.batch);
        for ids in &input.tokens {
            let (s, pl) = self.embed_text(p, ids)?;
            seqs.push(s);
            pooled.push(pl);
        }
        let text = TextBatch::new(&seqs)?;
        let pooled = Var::concat(&pooled)?;
        let singleton = lay.singleton.forward(
            p,
            &SingletonInput {
                t: &input.t,
                micro: &input.micro,
                pooled_text: &pooled,
            },
        )?;
        let (attn_mod, mlp_mod) = lay.adaln.forward(p, &singleton)?;

        let full_spatial = self.spatial_rope(&grid, None)?;
        let full_temporal = self.temporal_rope(&grid, None)?;
        let mask = mask.filter(|m| !m.is_identity());
        let (mut h, spatial_rope, temporal_rope) = match mask {
            None => (tokens, full_spatial.clone(), full_temporal.clone()),
            Some(m) => {
                let kept = m.apply(&tokens)?;
                match m.axis {
                    MaskAxis::Spatial => (kept, self.spatial_rope(&grid, Some(&m.kept))?, full_temporal.clone()),
                    MaskAxis::Temporal => (kept, full_spatial.clone(), self.temporal_rope(&grid, Some(&m.kept))?),
                }
            }
        };
        let ctx = BlockContext {
            attn_mod: &attn_mod,
            mlp_mod: &mlp_mod,
            text: &text,
            spatial_rope: &spatial_rope,
            temporal_rope: &temporal_rope,
        };
        for block in &lay.blocks {
            h = block.forward(p, &h, &ctx)?;
        }
        if let Some(m) = mask {
            h = m.unmask(&h, p.get(lay.mask_token))?;
        }
        let ctx = BlockContext {
            spatial_rope: &full_spatial,
            temporal_rope: &full_temporal,
            ..ctx
        };
        for block in &lay.decoder {
            h = block.forward(p, &h, &ctx)?;
        }
        let out = lay.head.forward(p, &stateless_layer_norm(&h)?)?;
        unpatchify(&out, &grid)
    }

    /// Inference forward without masking or gradient recording.
    pub fn predict(&self, input: &ModelInput<E>) -> Result<Tensor<E>> {
        let tape = Tape::inference();
        let p = self.params.bind(&tape);
        let v = self.forward(&p, input, None)?;
        Ok(v.value().clone())
    }
}
