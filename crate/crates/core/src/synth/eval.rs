use serde::{Deserialize, Serialize};

use crate::conditioning::{TaskKind, TaskMode};
use crate::error::{Result, StivError};
use crate::flow::{euler_sample, interpolant, velocity_target, GuidanceConfig, SampleRequest, SamplerConfig, VelocityField};
use crate::model::{Condition, ImageCondition, ModelInput, TextCondition, ToyCodec};
use crate::tensor::{Real, RngState, Tensor};

use super::{motion_oracle, Clip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub modes: Vec<TaskKind>,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Clips sampled together per call.
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            modes: vec![TaskKind::Ti2v, TaskKind::T2v],
            guidance: GuidanceConfig::default(),
            sampler: SamplerConfig::default(),
            seed: 0,
            batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: TaskKind,
    pub samples: usize,
    /// Fraction of samples whose decoded pinned frames equal the source bytes; absent
    /// for modes without pinned frames.
    pub first_frame_exact: Option<f64>,
    /// Fraction whose oracle direction matches the caption.
    pub direction_accuracy: f64,
    /// Fraction the oracle judges non-static.
    pub motion_presence: f64,
    pub nan_free: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modes: Vec<ModeReport>,
    pub heldout_loss: f64,
}

impl EvalReport {
    pub fn mode(&self, kind: TaskKind) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == kind)
    }
}

fn request<E: Real>(clip: &Clip, mode: TaskMode, seed: u64) -> Result<SampleRequest<E>> {
    let latent = clip.latent::<E>()?;
    let pinned = mode.pinned_frames();
    let image = if pinned.is_empty() {
        None
    } else {
        Some(ImageCondition::from_clip(&latent, pinned)?)
    };
    let mut micro = clip.micro;
    micro.sampling_stride = mode.sampling_stride();
    Ok(SampleRequest {
        cond: Condition {
            text: Some(TextCondition {
                tokens: clip.tokens.clone(),
            }),
            image,
        },
        mode,
        micro,
        seed,
    })
}

/// Samples each request, isolating failures so one diverging clip does not hide the
/// rest. `None` marks a clip whose trajectory went non-finite.
fn sample_all<E: Real, F: VelocityField<E>>(
    model: &F,
    requests: &[SampleRequest<E>],
    shape: [usize; 4],
    opts: &EvalOptions,
) -> Result<Vec<Option<Tensor<E>>>> {
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(opts.batch.max(1)) {
        match euler_sample(model, chunk, shape, &opts.guidance, &opts.sampler) {
            Ok(states) => out.extend(states.into_iter().map(|s| Some(s.data))),
            Err(StivError::NonFinite { .. }) => {
                for r in chunk {
                    match euler_sample(model, std::slice::from_ref(r), shape, &opts.guidance, &opts.sampler) {
                        Ok(mut s) => out.push(Some(s.remove(0).data)),
                        Err(StivError::NonFinite { .. }) => out.push(None),
                        Err(e) => return Err(e),
                    }
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Generates one sample per clip and mode and scores it with the motion oracle.
pub fn eval_suite<E: Real, F: VelocityField<E>>(model: &F, clips: &[Clip], opts: &EvalOptions) -> Result<EvalReport> {
    let Some(first) = clips.first() else {
        return Err(StivError::Invalid("evaluation needs at least one clip".into()));
    };
    let shape: [usize; 4] = first.latent::<E>()?.shape().try_into().expect("latent is 4-D");
    let mut modes = Vec::new();
    for &kind in &opts.modes {
        let mode = TaskMode::new(kind, shape[0])?;
        let requests = clips
            .iter()
            .enumerate()
            .map(|(i, c)| request::<E>(c, mode, opts.seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let samples = sample_all(model, &requests, shape, opts)?;
        let (mut exact, mut correct, mut moving, mut finite) = (0usize, 0usize, 0usize, 0usize);
        for (clip, sample) in clips.iter().zip(&samples) {
            let Some(latent) = sample else { continue };
            finite += 1;
            let video = ToyCodec::decode(latent)?;
            if mode.pinned_frames().iter().all(|&f| video.frame(f) == clip.video.frame(f)) {
                exact += 1;
            }
            let verdict = motion_oracle(&video);
            if !verdict.is_static() {
                moving += 1;
            }
            if verdict.direction == Some(clip.spec.direction) {
                correct += 1;
            }
        }
        let n = clips.len() as f64;
        modes.push(ModeReport {
            mode: kind,
            samples: clips.len(),
            first_frame_exact: mode.needs_image().then_some(exact as f64 / n),
            direction_accuracy: correct as f64 / n,
            motion_presence: moving as f64 / n,
            nan_free: finite as f64 / n,
        });
    }
    Ok(EvalReport {
        modes,
        heldout_loss: heldout_loss(model, clips, opts.seed)?,
    })
}

/// Text-conditioned flow-matching loss at `t ∈ {0.25, 0.5, 0.75}` with fixed noise.
pub fn heldout_loss<E: Real, F: VelocityField<E>>(model: &F, clips: &[Clip], seed: u64) -> Result<f64> {
    let mut rng = RngState::new(seed ^ 0x4E1D);
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in clips.chunks(16) {
        for t in [0.25, 0.5, 0.75] {
            let mut xs = Vec::new();
            let mut targets = Vec::new();
            for clip in chunk {
                let x1 = clip.latent::<E>()?;
                let eps = rng.gaussian::<E>(x1.shape());
                xs.push(interpolant(&x1, &eps, t)?);
                targets.push(velocity_target(&x1, &eps)?);
            }
            let input = ModelInput {
                x: Tensor::stack(&xs)?,
                t: vec![t; chunk.len()],
                micro: chunk.iter().map(|c| c.micro).collect(),
                tokens: chunk.iter().map(|c| c.tokens.clone()).collect(),
            };
            let v = model.velocity(&input)?;
            let target = Tensor::stack(&targets)?;
            total += v.data().iter().zip(target.data()).map(|(a, b)| (a.to_f64() - b.to_f64()).powi(2)).sum::<f64>();
            count += v.numel();
        }
    }
    Ok(total / count.max(1) as f64)
}
