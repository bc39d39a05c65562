use std::path::PathBuf;

use stiv::conditioning::TaskKind;
use stiv::flow::{sit_grid, GuidanceConfig, GuidanceScheme, SamplerConfig};
use stiv::synth::{eval_suite, EvalOptions};

use super::eval::heldout_clips;
use crate::checkpoint::Checkpoint;
use crate::error::{CliError, Result};

pub struct GridsearchArgs {
    pub ckpt: PathBuf,
    pub scales1: Vec<f64>,
    pub scales2: Vec<f64>,
    pub modes: Vec<TaskKind>,
    pub max_clips: Option<usize>,
    pub steps: usize,
    pub renorm: bool,
    pub seed: u64,
    pub raw: bool,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridRow {
    pub s1: f64,
    pub s2: f64,
    pub mode: String,
    pub direction_accuracy: f64,
    pub motion_presence: f64,
    pub nan_free: f64,
    pub heldout_loss: f64,
}

/// Scores the separate-guidance sampler at every (s1, s2) pair and writes
/// `gridsearch.csv`, one row per pair and mode, sorted by (s1, s2).
pub fn cmd_gridsearch(args: &GridsearchArgs) -> Result<Vec<GridRow>> {
    if args.scales1.is_empty() || args.scales2.is_empty() {
        return Err(CliError::Usage("--scales1 and --scales2 must each list at least one scale".into()));
    }
    if let Some(s) = args.scales1.iter().chain(&args.scales2).find(|s| !s.is_finite()) {
        return Err(CliError::Usage(format!("scale {s} is not finite")));
    }
    if args.modes.is_empty() {
        return Err(CliError::Usage("no modes to evaluate".into()));
    }
    let ck = Checkpoint::load(&args.ckpt)?;
    let model = if args.raw { ck.model()? } else { ck.eval_model()? };
    let clips = heldout_clips(&ck, args.max_clips)?;
    let mut rows = vec![];
    for (s1, s2) in sit_grid(&args.scales1, &args.scales2) {
        let opts = EvalOptions {
            modes: args.modes.clone(),
            guidance: GuidanceConfig {
                scheme: GuidanceScheme::Sit,
                s1,
                s2,
                renorm: args.renorm,
                ..GuidanceConfig::default()
            },
            sampler: SamplerConfig {
                n_steps: args.steps,
                ..SamplerConfig::default()
            },
            seed: args.seed,
            ..EvalOptions::default()
        };
        let report = eval_suite(&model, &clips, &opts)?;
        for m in &report.modes {
            rows.push(GridRow {
                s1,
                s2,
                mode: m.mode.name().to_string(),
                direction_accuracy: m.direction_accuracy,
                motion_presence: m.motion_presence,
                nan_free: m.nan_free,
                heldout_loss: report.heldout_loss,
            });
        }
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let path = args.out_dir.join("gridsearch.csv");
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}
