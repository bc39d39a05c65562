use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use stiv::conditioning::{TaskKind, TaskMode};
use stiv::flow::{euler_sample, SampleRequest, SamplerConfig};
use stiv::model::{Condition, ImageCondition, MicroConditions, PixelVideo, TextCondition, ToyCodec};
use stiv::Tensor;

use super::sample::{load_model, pixel_size, write_video, GuidanceArgs};
use crate::error::{CliError, Result};

pub struct LongVideoArgs {
    pub ckpt: PathBuf,
    pub caption: String,
    pub keyframe_stride: u32,
    /// Frames per generated segment; the model's clip length when absent.
    pub segment_frames: Option<usize>,
    /// Keyframes to generate; one segment's worth when absent.
    pub keyframes: Option<usize>,
    pub steps: usize,
    pub guidance: GuidanceArgs,
    pub seed: u64,
    pub raw: bool,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LongVideoReport {
    pub keyframes: usize,
    pub segment_frames: usize,
    pub frames: usize,
    /// First output frame of each segment.
    pub segment_starts: Vec<usize>,
}

/// Keyframes first (stride micro condition), then one interpolation segment per
/// consecutive keyframe pair with both ends pinned. Segments are concatenated whole,
/// so each inner keyframe appears as the last frame of one segment and the first of
/// the next: `(K - 1)·T` frames in total.
pub fn cmd_long_video(args: &LongVideoArgs) -> Result<(PixelVideo, LongVideoReport)> {
    let model = load_model(&args.ckpt, args.raw)?;
    let c = model.config.clone();
    let t = args.segment_frames.unwrap_or(c.frames);
    let k = args.keyframes.unwrap_or(t);
    if k < 2 {
        return Err(CliError::Usage(format!("long video needs at least 2 keyframes, got {k}")));
    }
    let text = if args.caption.trim().is_empty() {
        TextCondition::null()
    } else {
        TextCondition::from_caption(&args.caption)?
    };
    let (h, w) = pixel_size(&model);
    let shape = [t, c.height, c.width, c.channels];
    let sampler = SamplerConfig {
        n_steps: args.steps,
        ..SamplerConfig::default()
    };
    let g = args.guidance.config();

    let key_mode = TaskMode::new(TaskKind::Keyframe, t)?;
    let mut key_micro = MicroConditions::for_clip(h, w, t);
    key_micro.sampling_stride = args.keyframe_stride;
    let key_requests: Vec<_> = (0..k.div_ceil(t) as u64)
        .map(|i| SampleRequest {
            cond: Condition::text_only(text.clone()),
            mode: key_mode,
            micro: key_micro,
            seed: args.seed.wrapping_add(i),
        })
        .collect();
    let key_clips = euler_sample(&model, &key_requests, shape, &g, &sampler)?;
    let frame_len = c.height * c.width * c.channels;
    let keyframes: Vec<&[f32]> = key_clips.iter().flat_map(|clip| (0..t).map(move |f| clip.frame(f))).take(k).collect();

    let interp = TaskMode::new(TaskKind::Interpolate, t)?;
    let mut micro = MicroConditions::for_clip(h, w, t);
    micro.sampling_stride = interp.sampling_stride();
    let requests = keyframes
        .windows(2)
        .enumerate()
        .map(|(i, pair)| {
            let frames = Tensor::new(vec![2, c.height, c.width, c.channels], [pair[0], pair[1]].concat())?;
            debug_assert_eq!(frames.numel(), 2 * frame_len);
            Ok(SampleRequest {
                cond: Condition {
                    text: Some(text.clone()),
                    image: Some(ImageCondition::new(frames, interp.pinned_frames())?),
                },
                mode: interp,
                micro,
                seed: args.seed.wrapping_add(1_000_000 + i as u64),
            })
        })
        .collect::<stiv::Result<Vec<_>>>()?;
    let segments = euler_sample(&model, &requests, shape, &g, &sampler)?;
    let videos = segments
        .iter()
        .map(|s| ToyCodec::decode(&s.data))
        .collect::<stiv::Result<Vec<_>>>()?;
    let video = PixelVideo::concat(&videos)?;
    write_video(&args.out_dir, &video)?;
    let keys = key_clips.iter().map(|s| ToyCodec::decode(&s.data)).collect::<stiv::Result<Vec<_>>>()?;
    let keys = PixelVideo::concat(&keys)?;
    let keys: Vec<_> = (0..k).map(|f| keys.single_frame(f)).collect();
    write_video(&args.out_dir.join("keyframes"), &PixelVideo::concat(&keys)?)?;
    let report = LongVideoReport {
        keyframes: k,
        segment_frames: t,
        frames: video.frames,
        segment_starts: (0..k - 1).map(|i| i * t).collect(),
    };
    let path = args.out_dir.join("long_video.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok((video, report))
}
