use crate::error::{shape_err, Result};
use crate::tensor::{Real, Var};

/// Token grid produced by patchifying a `[B, T, H, W, C]` latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub batch: usize,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub spatial_patch: usize,
    pub temporal_patch: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(shape: &[usize], spatial_patch: usize, temporal_patch: usize) -> Result<Self> {
        let [b, t, h, w, c] = shape[..] else {
            return shape_err("cubify", format!("expected [B, T, H, W, C], got {shape:?}"));
        };
        if spatial_patch == 0 || temporal_patch == 0 {
            return shape_err("cubify", "patch sizes must be positive");
        }
        if t == 0 || t % temporal_patch != 0 || h % spatial_patch != 0 || w % spatial_patch != 0 {
            return shape_err(
                "cubify",
                format!("{t}x{h}x{w} not divisible by patch {temporal_patch}x{spatial_patch}x{spatial_patch}"),
            );
        }
        Ok(Self {
            batch: b,
            frames: t / temporal_patch,
            rows: h / spatial_patch,
            cols: w / spatial_patch,
            spatial_patch,
            temporal_patch,
            channels: c,
        })
    }

    pub fn sites(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_dim(&self) -> usize {
        self.temporal_patch * self.spatial_patch * self.spatial_patch * self.channels
    }

    fn expanded(&self) -> [usize; 8] {
        [
            self.batch,
            self.frames,
            self.temporal_patch,
            self.rows,
            self.spatial_patch,
            self.cols,
            self.spatial_patch,
            self.channels,
        ]
    }

    pub fn latent_shape(&self) -> [usize; 5] {
        [
            self.batch,
            self.frames * self.temporal_patch,
            self.rows * self.spatial_patch,
            self.cols * self.spatial_patch,
            self.channels,
        ]
    }
}

/// `[B, T, H, W, C] -> [B, T/pt, (H/ps)·(W/ps), pt·ps·ps·C]`, patch entries ordered
/// (frame, row, col, channel) and sites row-major.
pub fn patchify<'t, E: Real>(x: &Var<'t, E>, grid: &PatchGrid) -> Result<Var<'t, E>> {
    x.reshape(&grid.expanded())?
        .permute(&[0, 1, 3, 5, 2, 4, 6, 7])?
        .reshape(&[grid.batch, grid.frames, grid.sites(), grid.patch_dim()])
}

/// Inverse of [`patchify`].
pub fn unpatchify<'t, E: Real>(tokens: &Var<'t, E>, grid: &PatchGrid) -> Result<Var<'t, E>> {
    let g = grid;
    tokens
        .reshape(&[g.batch, g.frames, g.rows, g.cols, g.temporal_patch, g.spatial_patch, g.spatial_patch, g.channels])?
        .permute(&[0, 1, 4, 2, 5, 3, 6, 7])?
        .reshape(&g.latent_shape())
}
