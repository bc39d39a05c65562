//! Frame replacement, condition dropout and task modes.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StivError};
use crate::model::{Condition, ImageCondition, StivConfig, VideoLatent};
use crate::tensor::{Real, RngState};

/// Sampling-stride micro condition that selects keyframe generation.
pub const KEYFRAME_STRIDE: u32 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    T2v,
    Ti2v,
    Predict4,
    Interpolate,
    Keyframe,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::T2v,
        TaskKind::Ti2v,
        TaskKind::Predict4,
        TaskKind::Interpolate,
        TaskKind::Keyframe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::T2v => "t2v",
            TaskKind::Ti2v => "ti2v",
            TaskKind::Predict4 => "predict4",
            TaskKind::Interpolate => "interpolate",
            TaskKind::Keyframe => "keyframe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| StivError::Invalid(format!("unknown task mode `{s}`")))
    }
}

/// A task kind bound to a clip length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskMode {
    pub kind: TaskKind,
    pub frames: usize,
}

impl TaskMode {
    /// Rejects modes that would pin every frame, leaving nothing to generate.
    pub fn new(kind: TaskKind, frames: usize) -> Result<Self> {
        let mode = Self { kind, frames };
        if frames == 0 {
            return Err(StivError::Condition("clip has no frames".into()));
        }
        let pinned = mode.pinned_frames();
        if pinned.len() >= frames || pinned.iter().any(|&f| f >= frames) {
            return Err(StivError::Condition(format!(
                "{} pins {:?} of a {frames}-frame clip, leaving nothing to generate",
                kind.name(),
                pinned
            )));
        }
        Ok(mode)
    }

    pub fn pinned_frames(&self) -> Vec<usize> {
        match self.kind {
            TaskKind::T2v | TaskKind::Keyframe => vec![],
            TaskKind::Ti2v => vec![0],
            TaskKind::Predict4 => vec![0, 1, 2, 3],
            TaskKind::Interpolate => vec![0, self.frames.saturating_sub(1)],
        }
    }

    pub fn needs_image(&self) -> bool {
        !self.pinned_frames().is_empty()
    }

    pub fn sampling_stride(&self) -> u32 {
        match self.kind {
            TaskKind::Keyframe => KEYFRAME_STRIDE,
            _ => 1,
        }
    }

    /// Same clip length with the image condition dropped.
    pub fn text_only(&self) -> Self {
        let kind = match self.kind {
            TaskKind::Keyframe => TaskKind::Keyframe,
            _ => TaskKind::T2v,
        };
        Self { kind, ..*self }
    }
}

/// Frames that contribute to the flow-matching loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossMask {
    pub frames: Vec<bool>,
}

impl LossMask {
    pub fn all(frames: usize) -> Self {
        Self {
            frames: vec![true; frames],
        }
    }

    pub fn for_mode(mode: &TaskMode, first_frame_loss: bool) -> Self {
        let mut m = Self::all(mode.frames);
        if !first_frame_loss {
            for f in mode.pinned_frames() {
                m.frames[f] = false;
            }
        }
        m
    }

    pub fn included(&self) -> usize {
        self.frames.iter().filter(|&&b| b).count()
    }
}

fn check_image<E: Real>(x: &VideoLatent<E>, image: Option<&ImageCondition<E>>, mode: &TaskMode) -> Result<()> {
    let pinned = mode.pinned_frames();
    if x.frames() != mode.frames {
        return Err(StivError::Condition(format!(
            "{}-frame state for a {}-frame mode",
            x.frames(),
            mode.frames
        )));
    }
    match image {
        None if pinned.is_empty() => Ok(()),
        None => Err(StivError::Condition(format!(
            "{} needs image frames {pinned:?}",
            mode.kind.name()
        ))),
        Some(img) => {
            if img.frame_indices != pinned {
                return Err(StivError::Condition(format!(
                    "image frames {:?} do not match {} pins {pinned:?}",
                    img.frame_indices,
                    mode.kind.name()
                )));
            }
            if img.frames.shape()[1..] != x.data.shape()[1..] {
                return Err(StivError::Condition(format!(
                    "image frames {:?} vs latent {:?}",
                    img.frames.shape(),
                    x.data.shape()
                )));
            }
            Ok(())
        }
    }
}

/// Overwrites the pinned frames of the state with the clean condition frames.
pub fn pin_state<E: Real>(x: &VideoLatent<E>, image: Option<&ImageCondition<E>>, mode: &TaskMode) -> Result<VideoLatent<E>> {
    check_image(x, image, mode)?;
    let mut out = x.clone();
    if let Some(img) = image {
        for (k, &f) in img.frame_indices.iter().enumerate() {
            let n = out.frame_len();
            out.frame_mut(f).copy_from_slice(&img.frames.data()[k * n..(k + 1) * n]);
        }
    }
    Ok(out)
}

/// Training-side replacement: pins the condition frames into the noised latent and
/// masks their loss unless `first_frame_loss` is set.
pub fn apply_frame_replacement<E: Real>(
    x_t: &VideoLatent<E>,
    image: Option<&ImageCondition<E>>,
    mode: &TaskMode,
    first_frame_loss: bool,
) -> Result<(VideoLatent<E>, LossMask)> {
    Ok((pin_state(x_t, image, mode)?, LossMask::for_mode(mode, first_frame_loss)))
}

/// Independently drops the text (with `text_dropout_p`) and the image (with
/// `image_dropout_p`). A dropped image collapses the mode to text-only generation.
pub fn sample_training_condition<E: Real>(
    rng: &mut RngState,
    full: &Condition<E>,
    mode: &TaskMode,
    cfg: &StivConfig,
) -> (Condition<E>, TaskMode) {
    let drop_text = rng.bernoulli(cfg.text_dropout_p);
    let drop_image = rng.bernoulli(cfg.image_dropout_p);
    let mut cond = full.clone();
    let mut mode = *mode;
    if drop_text {
        cond.text = None;
    }
    if drop_image && cond.image.is_some() {
        cond.image = None;
        mode = mode.text_only();
    }
    (cond, mode)
}
