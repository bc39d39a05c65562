//! Rotary position embeddings: 1-D over frame index and 2-D over (row, col).

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StivError};
use crate::tensor::{Real, Tensor, Var};

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeKind {
    Temporal1d,
    Spatial2d,
}

/// Frequency schedule for one attention axis.
///
/// `position_scale` multiplies every position before rotation: 1 is the identity
/// schedule, `old_len / new_len` interpolates a table trained on shorter extents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeTable {
    pub kind: RopeKind,
    pub head_dim: usize,
    pub base: f64,
    pub position_scale: f64,
}

/// A token position: frame index for 1-D tables, `(row, col)` for 2-D ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Position {
    Frame(f64),
    Grid(f64, f64),
}

/// Precomputed `[tables, L, head_dim]` cosines and sines with each pair angle repeated.
#[derive(Clone, Debug)]
pub struct RopeAngles<E> {
    pub cos: Rc<Tensor<E>>,
    pub sin: Rc<Tensor<E>>,
}

impl RopeTable {
    pub fn new(kind: RopeKind, head_dim: usize) -> Result<Self> {
        let table = Self {
            kind,
            head_dim,
            base: ROPE_BASE,
            position_scale: 1.0,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn with_scale(mut self, position_scale: f64) -> Self {
        self.position_scale = position_scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let divisor = match self.kind {
            RopeKind::Temporal1d => 2,
            RopeKind::Spatial2d => 4,
        };
        if self.head_dim == 0 || self.head_dim % divisor != 0 {
            return Err(StivError::Invalid(format!(
                "{:?} rope needs head_dim divisible by {divisor}, got {}",
                self.kind, self.head_dim
            )));
        }
        if !(self.position_scale >= 0.0) {
            return Err(StivError::Invalid("rope position_scale must be >= 0".into()));
        }
        Ok(())
    }

    /// Rotation angle of every pair for one position, in pair order.
    pub fn pair_angles(&self, pos: Position) -> Result<Vec<f64>> {
        self.validate()?;
        let s = self.position_scale;
        match (self.kind, pos) {
            (RopeKind::Temporal1d, Position::Frame(p)) => {
                let pairs = self.head_dim / 2;
                Ok((0..pairs)
                    .map(|j| p * s * self.base.powf(-2.0 * j as f64 / self.head_dim as f64))
                    .collect())
            }
            (RopeKind::Spatial2d, Position::Grid(r, c)) => {
                let half = self.head_dim / 2;
                let pairs = half / 2;
                let freq = |j: usize| self.base.powf(-2.0 * j as f64 / half as f64);
                Ok((0..pairs)
                    .map(|j| r * s * freq(j))
                    .chain((0..pairs).map(|j| c * s * freq(j)))
                    .collect())
            }
            (kind, pos) => Err(StivError::Invalid(format!(
                "{pos:?} is not a position for a {kind:?} table"
            ))),
        }
    }

    /// Angle tables for one or more position lists of equal length.
    pub fn angles<E: Real>(&self, groups: &[Vec<Position>]) -> Result<RopeAngles<E>> {
        let len = groups.first().map_or(0, Vec::len);
        let d = self.head_dim;
        let mut cos = Vec::with_capacity(groups.len() * len * d);
        let mut sin = Vec::with_capacity(groups.len() * len * d);
        for g in groups {
            if g.len() != len {
                return Err(StivError::Invalid("ragged rope position groups".into()));
            }
            for &pos in g {
                for a in self.pair_angles(pos)? {
                    let (s, c) = a.sin_cos();
                    cos.extend([E::from_f64(c); 2]);
                    sin.extend([E::from_f64(s); 2]);
                }
            }
        }
        let shape = [groups.len(), len, d];
        Ok(RopeAngles {
            cos: Rc::new(Tensor::new(shape, cos)?),
            sin: Rc::new(Tensor::new(shape, sin)?),
        })
    }
}

/// Rotates `qk` (`[..., positions, head_dim]`) by the given angle tables.
pub fn rope_apply<'t, E: Real>(qk: &Var<'t, E>, angles: &RopeAngles<E>) -> Result<Var<'t, E>> {
    qk.rope(angles.cos.clone(), angles.sin.clone())
}

/// Frame positions `0..len`.
pub fn frame_positions(len: usize) -> Vec<Position> {
    (0..len).map(|t| Position::Frame(t as f64)).collect()
}

/// Row-major grid positions for the given flat site indices.
pub fn grid_positions(sites: &[usize], width: usize) -> Vec<Position> {
    sites
        .iter()
        .map(|&s| Position::Grid((s / width) as f64, (s % width) as f64))
        .collect()
}
