use std::path::{Path, PathBuf};

use stiv::conditioning::TaskKind;
use stiv::flow::{GuidanceConfig, SamplerConfig};
use stiv::model::StivConfig;
use stiv::synth::{corpus, eval_suite, ppm, Clip, CorpusConfig, EvalOptions, EvalReport};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// The corpus a checkpoint was trained on, or the default corpus at the model's size.
pub fn checkpoint_corpus(ck: &Checkpoint) -> Result<CorpusConfig> {
    if let Some(run) = ck.train.as_ref().and_then(|t| t.run.as_ref()) {
        let run: RunConfig =
            serde_json::from_value(run.clone()).map_err(|e| CliError::Config(format!("stored run config: {e}")))?;
        return Ok(run.data);
    }
    Ok(corpus_for(&ck.config))
}

pub fn corpus_for(model: &StivConfig) -> CorpusConfig {
    CorpusConfig {
        frames: model.frames,
        height: 2 * model.height,
        width: 2 * model.width,
        ..CorpusConfig::default()
    }
}

/// Held-out clips of the checkpoint's corpus, capped at `max_clips`.
pub fn heldout_clips(ck: &Checkpoint, max_clips: Option<usize>) -> Result<Vec<Clip>> {
    let (_, mut heldout) = corpus(&checkpoint_corpus(ck)?)?;
    if let Some(n) = max_clips {
        heldout.truncate(n);
    }
    if heldout.is_empty() {
        return Err(CliError::Usage("no held-out clips to evaluate".into()));
    }
    Ok(heldout)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub modes: Vec<TaskKind>,
    pub max_clips: Option<usize>,
    pub steps: usize,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub raw: bool,
    pub out_dir: PathBuf,
}

/// Scores a checkpoint on its held-out clips and writes `eval.json`.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let model = if args.raw { ck.model()? } else { ck.eval_model()? };
    let clips = heldout_clips(&ck, args.max_clips)?;
    let opts = EvalOptions {
        modes: args.modes.clone(),
        guidance: args.guidance,
        sampler: SamplerConfig {
            n_steps: args.steps,
            ..SamplerConfig::default()
        },
        seed: args.seed,
        ..EvalOptions::default()
    };
    let report = eval_suite(&model, &clips, &opts)?;
    write_json(&args.out_dir.join("eval.json"), &report)?;
    Ok(report)
}

/// Writes the corpus as PPM frame directories with caption sidecars.
pub fn cmd_export_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<(usize, usize)> {
    let (train, heldout) = corpus(config)?;
    ppm::export_corpus(&out_dir.join("train"), &train)?;
    ppm::export_corpus(&out_dir.join("heldout"), &heldout)?;
    Ok((train.len(), heldout.len()))
}
