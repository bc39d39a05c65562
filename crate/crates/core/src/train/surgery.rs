//! Initializing larger or longer models from trained smaller ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StivError};
use crate::model::{StivConfig, StivModel};
use crate::nn::ParamStore;
use crate::tensor::{Real, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Byte-identical copy.
    Copied,
    /// Spread across temporal patch slices.
    Inflated,
    /// Freshly initialized.
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Source checkpoint label, absent for fresh tensors.
    pub source: Option<String>,
    pub origin: Origin,
}

/// Target parameter name → where its value came from.
pub type AuditMap = BTreeMap<String, Provenance>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeMode {
    /// Squeeze the longer clip into the old position range.
    Interpolate,
    /// Keep positions; new frames get positions never seen in training.
    Extrapolate,
}

impl RopeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "interpolate" => Ok(Self::Interpolate),
            "extrapolate" => Ok(Self::Extrapolate),
            _ => Err(StivError::Invalid(format!("unknown rope mode `{s}`"))),
        }
    }
}

fn is_temporal(name: &str) -> bool {
    name.contains(".temporal_attn.")
}

fn same_width(target: &StivConfig, source: &StivConfig, label: &str) -> Result<()> {
    let dims = [
        ("hidden_dim", target.hidden_dim, source.hidden_dim),
        ("n_heads", target.n_heads, source.n_heads),
        ("text_dim", target.text_dim, source.text_dim),
        ("vocab_size", target.vocab_size, source.vocab_size),
        ("freq_dim", target.freq_dim, source.freq_dim),
        ("channels", target.channels, source.channels),
        ("spatial_patch", target.spatial_patch, source.spatial_patch),
        ("n_blocks", target.n_blocks, source.n_blocks),
        ("n_decoder_blocks", target.n_decoder_blocks, source.n_decoder_blocks),
    ];
    for (name, t, s) in dims {
        if t != s {
            return Err(StivError::Incompatible {
                name: format!("{label}:{name}"),
                detail: format!("target {t}, source {s}"),
            });
        }
    }
    Ok(())
}

/// Spreads an image-model tensor across `pt` temporal patch slices. Patch vectors are
/// laid out `[pt, ps, ps, C]`, so the slices are contiguous blocks of the image layout.
/// The input projection is divided by `pt`, so a clip that is constant within a
/// temporal patch embeds exactly as one image frame; the head is replicated, so every
/// frame of a patch receives the image prediction.
fn inflate<E: Real>(name: &str, src: &Tensor<E>, target_shape: &[usize], pt: usize) -> Result<Tensor<E>> {
    let bad = || StivError::Incompatible {
        name: name.to_string(),
        detail: format!("cannot inflate {:?} to {:?}", src.shape(), target_shape),
    };
    let s = src.shape();
    let out = match name {
        "patch_embed.weight" if s.len() == 2 && target_shape == [pt * s[0], s[1]] => {
            let k = E::from_f64(1.0 / pt as f64);
            let scaled: Vec<E> = src.data().iter().map(|&v| v * k).collect();
            Tensor::new(target_shape.to_vec(), scaled.repeat(pt))?
        }
        "head.weight" if s.len() == 2 && target_shape == [s[0], pt * s[1]] => {
            let cols = s[1];
            Tensor::from_fn(target_shape, |i| src.data()[(i / (pt * cols)) * cols + i % cols])
        }
        "head.bias" if s.len() == 1 && target_shape == [pt * s[0]] => {
            Tensor::new(target_shape.to_vec(), src.data().repeat(pt))?
        }
        _ => return Err(bad()),
    };
    Ok(out)
}

/// Fills `target` from `source`: identical shapes are copied, patch input/output
/// tensors are inflated when the temporal patch grew, and anything the source lacks is
/// left as initialized. `pick` decides which target names this source may supply.
fn transfer<E: Real>(
    target: &mut ParamStore<E>,
    audit: &mut AuditMap,
    source: &ParamStore<E>,
    label: &str,
    pt: usize,
    pick: impl Fn(&str) -> bool,
) -> Result<()> {
    for name in target.names().to_vec() {
        if !pick(&name) {
            continue;
        }
        let Some(src) = source.by_name(&name) else { continue };
        let shape = target.by_name(&name).expect("listed name").shape().to_vec();
        let (value, origin) = if src.shape() == shape.as_slice() {
            (src.clone(), Origin::Copied)
        } else {
            (inflate(&name, src, &shape, pt)?, Origin::Inflated)
        };
        target.set(&name, value)?;
        audit.insert(
            name,
            Provenance {
                source: Some(label.to_string()),
                origin,
            },
        );
    }
    Ok(())
}

fn fresh_entries<E: Real>(params: &ParamStore<E>, audit: &mut AuditMap) {
    for name in params.names() {
        audit.entry(name.clone()).or_insert(Provenance {
            source: None,
            origin: Origin::Fresh,
        });
    }
}

/// A video model whose spatial, cross-attention, FFN, embedder and head weights come
/// from an image model. Temporal attention is freshly initialized with a zero output
/// projection, so the new model starts out computing the image model frame by frame.
pub fn init_t2v_from_t2i<E: Real>(
    t2i: &StivModel<E>,
    config: StivConfig,
    rng: &mut RngState,
) -> Result<(StivModel<E>, AuditMap)> {
    same_width(&config, &t2i.config, "t2i")?;
    if t2i.config.temporal_patch != 1 {
        return Err(StivError::Incompatible {
            name: "t2i:temporal_patch".into(),
            detail: format!("image source must use temporal patch 1, has {}", t2i.config.temporal_patch),
        });
    }
    let mut model = StivModel::<E>::new(config.clone(), rng)?;
    let mut audit = AuditMap::new();
    transfer(&mut model.params, &mut audit, &t2i.params, "t2i", config.temporal_patch, |n| !is_temporal(n))?;
    fresh_entries(&model.params, &mut audit);
    Ok((model, audit))
}

/// Temporal attention from a low-resolution video model, everything else from a
/// high-resolution image model. The spatial RoPE scale becomes
/// `old grid / new grid` so the new resolution reuses the old position range.
pub fn init_from_both<E: Real>(
    t2v: &StivModel<E>,
    t2i: &StivModel<E>,
    config: StivConfig,
    rng: &mut RngState,
) -> Result<(StivModel<E>, AuditMap)> {
    same_width(&config, &t2v.config, "t2v")?;
    if !t2v.config.temporal {
        return Err(StivError::Incompatible {
            name: "t2v:temporal".into(),
            detail: "video source has no temporal attention".into(),
        });
    }
    let mut config = config;
    let (old, _) = t2v.config.grid();
    let (new, _) = config.grid();
    config.spatial_rope_scale = t2v.config.spatial_rope_scale * old as f64 / new as f64;
    let (mut model, mut audit) = init_t2v_from_t2i(t2i, config, rng)?;
    for name in model.params.names().iter().filter(|n| is_temporal(n)) {
        if t2v.params.by_name(name).is_none() {
            return Err(StivError::Incompatible {
                name: name.clone(),
                detail: "missing from the video source".into(),
            });
        }
    }
    transfer(&mut model.params, &mut audit, &t2v.params, "t2v", 1, is_temporal)?;
    Ok((model, audit))
}

/// Copies a short-clip model into a `new_frames` model. Interpolation scales temporal
/// RoPE positions by `old / new`; extrapolation keeps them.
pub fn extend_frames_init<E: Real>(
    short: &StivModel<E>,
    new_frames: usize,
    mode: RopeMode,
) -> Result<(StivModel<E>, AuditMap)> {
    let old = short.config.frames;
    if new_frames < old {
        return Err(StivError::Invalid(format!("cannot shrink {old} frames to {new_frames}")));
    }
    let mut config = short.config.clone();
    config.frames = new_frames;
    if mode == RopeMode::Interpolate {
        config.temporal_rope_scale = short.config.temporal_rope_scale * old as f64 / new_frames as f64;
    }
    let model = short.with_config(config)?;
    let audit = model
        .params
        .names()
        .iter()
        .map(|n| {
            (
                n.clone(),
                Provenance {
                    source: Some("short".into()),
                    origin: Origin::Copied,
                },
            )
        })
        .collect();
    Ok((model, audit))
}
