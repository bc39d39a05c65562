use crate::error::{Result, StivError};
use crate::tensor::{Real, Tensor};

use super::text;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextCondition {
    pub tokens: Vec<usize>,
}

impl TextCondition {
    pub fn null() -> Self {
        Self {
            tokens: text::null_text(),
        }
    }

    pub fn from_caption(caption: &str) -> Result<Self> {
        Ok(Self {
            tokens: text::tokenize(caption)?,
        })
    }

    pub fn is_null(&self) -> bool {
        text::is_null(&self.tokens)
    }
}

/// Clean latent frames pinned at `frame_indices`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCondition<E> {
    /// `[K, H, W, C]`.
    pub frames: Tensor<E>,
    /// Sorted, unique.
    pub frame_indices: Vec<usize>,
}

impl<E: Real> ImageCondition<E> {
    pub fn new(frames: Tensor<E>, frame_indices: Vec<usize>) -> Result<Self> {
        if frames.ndim() != 4 || frames.shape()[0] != frame_indices.len() {
            return Err(StivError::Condition(format!(
                "{} frame indices for image frames {:?}",
                frame_indices.len(),
                frames.shape()
            )));
        }
        if frame_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(StivError::Condition("frame indices must be sorted and unique".into()));
        }
        Ok(Self {
            frames,
            frame_indices,
        })
    }

    /// Takes the listed frames of a `[T, H, W, C]` clip.
    pub fn from_clip(clip: &Tensor<E>, frame_indices: Vec<usize>) -> Result<Self> {
        let t = clip.shape().first().copied().unwrap_or(0);
        if let Some(&bad) = frame_indices.iter().find(|&&f| f >= t) {
            return Err(StivError::Condition(format!("frame {bad} outside clip of {t} frames")));
        }
        let frames = frame_indices.iter().map(|&f| clip.index0(f)).collect::<Vec<_>>();
        Self::new(Tensor::stack(&frames)?, frame_indices)
    }

    pub fn frame(&self, k: usize) -> Tensor<E> {
        self.frames.index0(k)
    }
}

/// Optional text and image conditions. `None` text means the null prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition<E> {
    pub text: Option<TextCondition>,
    pub image: Option<ImageCondition<E>>,
}

impl<E: Real> Condition<E> {
    pub fn unconditional() -> Self {
        Self {
            text: None,
            image: None,
        }
    }

    pub fn text_only(text: TextCondition) -> Self {
        Self {
            text: Some(text),
            image: None,
        }
    }

    /// Token ids the model embeds; the null token when text is absent.
    pub fn tokens(&self) -> Vec<usize> {
        self.text.as_ref().map_or_else(text::null_text, |t| t.tokens.clone())
    }

    pub fn without_image(&self) -> Self {
        Self {
            text: self.text.clone(),
            image: None,
        }
    }

    pub fn without_text(&self) -> Self {
        Self {
            text: None,
            image: self.image.clone(),
        }
    }
}
