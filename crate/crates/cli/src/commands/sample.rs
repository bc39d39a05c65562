use std::path::{Path, PathBuf};

use stiv::conditioning::{TaskKind, TaskMode};
use stiv::flow::{euler_sample, GuidanceConfig, GuidanceScheme, SampleRequest, SamplerConfig};
use stiv::model::{Condition, ImageCondition, MicroConditions, PixelVideo, StivModel, TextCondition, ToyCodec};
use stiv::synth::ppm;
use stiv::Tensor;

use crate::checkpoint::Checkpoint;
use crate::error::{CliError, Result};

#[derive(Clone, Debug)]
pub struct GuidanceArgs {
    pub scheme: GuidanceScheme,
    pub scale: f64,
    pub s1: f64,
    pub s2: f64,
    pub renorm: bool,
}

impl GuidanceArgs {
    pub fn config(&self) -> GuidanceConfig {
        GuidanceConfig {
            scheme: self.scheme,
            s: self.scale,
            s1: self.s1,
            s2: self.s2,
            renorm: self.renorm,
        }
    }
}

pub struct SampleArgs {
    pub ckpt: PathBuf,
    pub mode: TaskKind,
    pub caption: String,
    pub images: Vec<PathBuf>,
    pub steps: usize,
    pub guidance: GuidanceArgs,
    pub seed: u64,
    /// Use raw weights even when the checkpoint carries EMA weights.
    pub raw: bool,
    pub out_dir: PathBuf,
}

pub fn load_model(path: &Path, raw: bool) -> Result<StivModel<f32>> {
    let ck = Checkpoint::load(path)?;
    if raw {
        ck.model()
    } else {
        ck.eval_model()
    }
}

/// Pixel resolution the toy codec maps onto the model's latent grid.
pub fn pixel_size(model: &StivModel<f32>) -> (usize, usize) {
    (2 * model.config.height, 2 * model.config.width)
}

/// Encodes condition images, one per pinned frame of `mode`.
pub fn image_condition(
    model: &StivModel<f32>,
    mode: &TaskMode,
    frames: &[PixelVideo],
) -> Result<Option<ImageCondition<f32>>> {
    let pinned = mode.pinned_frames();
    if frames.len() != pinned.len() {
        return Err(CliError::Usage(format!(
            "{} needs {} condition image(s), got {}",
            mode.kind.name(),
            pinned.len(),
            frames.len()
        )));
    }
    if pinned.is_empty() {
        return Ok(None);
    }
    let (h, w) = pixel_size(model);
    for f in frames {
        if (f.height, f.width) != (h, w) {
            return Err(CliError::Usage(format!(
                "condition image is {}x{}, model expects {w}x{h}",
                f.width, f.height
            )));
        }
    }
    let latent = ToyCodec::encode::<f32>(&PixelVideo::concat(frames)?)?;
    Ok(Some(ImageCondition::new(latent, pinned)?))
}

pub fn write_latent(dir: &Path, latent: &Tensor<f32>) -> Result<()> {
    let bytes: Vec<u8> = latent.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let bin = dir.join("latent.bin");
    std::fs::write(&bin, bytes).map_err(|e| CliError::io(&bin, e))?;
    let meta = dir.join("latent.json");
    let text = serde_json::json!({"dtype": "f32", "endian": "little", "shape": latent.shape()}).to_string();
    std::fs::write(&meta, text + "\n").map_err(|e| CliError::io(&meta, e))
}

pub fn write_video(dir: &Path, video: &PixelVideo) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    ppm::write_frames(dir, video)?;
    Ok(())
}

/// Generates one clip and writes `frame_NNNN.ppm` plus the raw latent.
pub fn cmd_sample(args: &SampleArgs) -> Result<PixelVideo> {
    let model = load_model(&args.ckpt, args.raw)?;
    let frames = model.config.frames;
    let mode = TaskMode::new(args.mode, frames)?;
    let images = args
        .images
        .iter()
        .map(|p| ppm::read(p).map_err(CliError::from))
        .collect::<Result<Vec<_>>>()?;
    let image = image_condition(&model, &mode, &images)?;
    let text = if args.caption.trim().is_empty() {
        TextCondition::null()
    } else {
        TextCondition::from_caption(&args.caption)?
    };
    let (h, w) = pixel_size(&model);
    let mut micro = MicroConditions::for_clip(h, w, frames);
    micro.sampling_stride = mode.sampling_stride();
    let request = SampleRequest {
        cond: Condition {
            text: Some(text),
            image,
        },
        mode,
        micro,
        seed: args.seed,
    };
    let c = &model.config;
    let sampler = SamplerConfig {
        n_steps: args.steps,
        ..SamplerConfig::default()
    };
    let shape = [c.frames, c.height, c.width, c.channels];
    let out = euler_sample(&model, &[request], shape, &args.guidance.config(), &sampler)?.remove(0);
    let video = ToyCodec::decode(&out.data)?;
    write_video(&args.out_dir, &video)?;
    write_latent(&args.out_dir, &out.data)?;
    Ok(video)
}
