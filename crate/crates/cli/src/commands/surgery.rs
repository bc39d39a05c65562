use std::path::PathBuf;

use stiv::train::{extend_frames_init, init_from_both, init_t2v_from_t2i, AuditMap, Origin, RopeMode};
use stiv::RngState;

use super::sample::load_model;
use crate::checkpoint::Checkpoint;
use crate::config::load_model_config;
use crate::error::{CliError, Result};

pub struct SurgeryArgs {
    pub from_t2i: Option<PathBuf>,
    pub from_t2v: Option<PathBuf>,
    pub target: PathBuf,
    pub rope: Option<RopeMode>,
    /// Seeds the freshly initialized tensors.
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug)]
pub struct SurgerySummary {
    pub checkpoint: PathBuf,
    pub audit: AuditMap,
}

impl SurgerySummary {
    pub fn count(&self, origin: Origin) -> usize {
        self.audit.values().filter(|p| p.origin == origin).count()
    }
}

/// Image source alone: video from image. Image and video sources: temporal weights
/// from the video model, the rest from the image model. Video source with `--rope`:
/// frame-count extension to the target's frame count.
pub fn cmd_surgery(args: &SurgeryArgs) -> Result<SurgerySummary> {
    let target = load_model_config(&args.target)?;
    let mut rng = RngState::new(args.seed);
    // Sources are always taken raw; surgery on EMA weights goes through a sample-ready
    // checkpoint instead.
    let (model, audit) = match (&args.from_t2i, &args.from_t2v, args.rope) {
        (Some(t2i), None, None) => init_t2v_from_t2i(&load_model(t2i, false)?, target, &mut rng)?,
        (Some(t2i), Some(t2v), None) => {
            init_from_both(&load_model(t2v, false)?, &load_model(t2i, false)?, target, &mut rng)?
        }
        (None, Some(t2v), Some(rope)) => {
            let short = load_model(t2v, false)?;
            let (model, audit) = extend_frames_init(&short, target.frames, rope)?;
            let mut want = target.clone();
            want.frames = model.config.frames;
            want.temporal_rope_scale = model.config.temporal_rope_scale;
            if want != model.config {
                return Err(CliError::Usage(
                    "frame extension target may differ from the source only in frames".into(),
                ));
            }
            (model, audit)
        }
        (None, None, _) => return Err(CliError::Usage("surgery needs --from-t2i or --from-t2v".into())),
        (_, _, Some(_)) => return Err(CliError::Usage("--rope applies only to --from-t2v alone".into())),
        (None, Some(_), None) => return Err(CliError::Usage("--from-t2v alone needs --rope".into())),
    };
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let checkpoint = args.out_dir.join("model.stiv");
    Checkpoint::from_model(&model).save(&checkpoint)?;
    let path = args.out_dir.join("audit.json");
    let text = serde_json::to_string_pretty(&audit).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(SurgerySummary { checkpoint, audit })
}
