use std::rc::Rc;

use crate::error::{shape_err, Result, StivError};
use crate::tensor::{Real, RngState, Tensor, Var};

use super::config::MaskAxis;

/// Per-sample token subsets kept through the main blocks.
///
/// For the spatial axis the same sites are kept in every frame of a sample, so
/// temporal attention still sees a rectangular grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    pub axis: MaskAxis,
    /// Extent of the masked axis (sites or token frames).
    pub full_len: usize,
    /// Sorted kept indices, one list per sample.
    pub kept: Vec<Vec<usize>>,
}

pub fn kept_count(ratio: f64, len: usize) -> usize {
    ((1.0 - ratio) * len as f64).round() as usize
}

impl TokenMask {
    /// Keeps `round((1 - ratio)·len)` indices per sample, at least one.
    pub fn sample(ratio: f64, axis: MaskAxis, batch: usize, len: usize, rng: &mut RngState) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(StivError::Invalid(format!("mask ratio must lie in [0, 1), got {ratio}")));
        }
        let k = kept_count(ratio, len).clamp(1, len);
        let kept = (0..batch)
            .map(|_| if k == len { (0..len).collect() } else { rng.subset(len, k) })
            .collect();
        Ok(Self {
            axis,
            full_len: len,
            kept,
        })
    }

    pub fn none(axis: MaskAxis, batch: usize, len: usize) -> Self {
        Self {
            axis,
            full_len: len,
            kept: vec![(0..len).collect(); batch],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.kept.iter().all(|k| k.len() == self.full_len)
    }

    /// Complement of the kept set for sample `b`.
    pub fn masked(&self, b: usize) -> Vec<usize> {
        let mut keep = vec![false; self.full_len];
        for &i in &self.kept[b] {
            keep[i] = true;
        }
        (0..self.full_len).filter(|&i| !keep[i]).collect()
    }

    fn token_axis(&self) -> usize {
        match self.axis {
            MaskAxis::Temporal => 1,
            MaskAxis::Spatial => 2,
        }
    }

    pub(crate) fn check(&self, batch: usize, len: usize) -> Result<()> {
        let ragged = self.kept.windows(2).any(|w| w[0].len() != w[1].len());
        if self.kept.len() != batch || self.full_len != len || ragged || self.kept[0].is_empty() {
            return shape_err(
                "mask_tokens",
                format!("mask over {} of {} samples does not fit {batch} x {len}", self.full_len, self.kept.len()),
            );
        }
        for k in &self.kept {
            if k.windows(2).any(|w| w[0] >= w[1]) || k.iter().any(|&i| i >= len) {
                return shape_err("mask_tokens", "kept indices must be sorted, unique and in range");
            }
        }
        Ok(())
    }

    /// Selects the kept tokens of `[B, T, S, D]`.
    pub fn apply<'t, E: Real>(&self, tokens: &Var<'t, E>) -> Result<Var<'t, E>> {
        let axis = self.token_axis();
        self.check(tokens.shape()[0], tokens.shape()[axis])?;
        tokens.index_select(axis, Rc::new(self.kept.clone()))
    }

    /// Scatters processed kept tokens back to the full grid and fills every masked
    /// slot with `mask_token` (`[D]`).
    pub fn unmask<'t, E: Real>(&self, kept: &Var<'t, E>, mask_token: &Var<'t, E>) -> Result<Var<'t, E>> {
        let axis = self.token_axis();
        let batch = kept.shape()[0];
        let full = kept.scatter(axis, Rc::new(self.kept.clone()), self.full_len)?;
        let mut fill_shape = vec![batch, 1, 1, 1];
        fill_shape[axis] = self.full_len;
        let mut fill = Tensor::<E>::zeros(&fill_shape);
        for b in 0..batch {
            for i in self.masked(b) {
                fill.data_mut()[b * self.full_len + i] = E::ONE;
            }
        }
        let fill = kept.tape().constant(fill);
        full.add(&fill.mul(mask_token)?)
    }
}
