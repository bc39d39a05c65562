use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stiv::model::{StivConfig, StivModel};
use stiv::synth::{corpus, eval_suite, EvalOptions, EvalReport};
use stiv::train::{StepStats, TrainExample, Trainer};
use stiv::RngState;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub struct TrainArgs {
    pub config: PathBuf,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub eval: Option<EvalReport>,
}

#[derive(Serialize, Deserialize)]
struct LossRow {
    step: u64,
    loss: f64,
    grad_norm: f64,
    lr: f64,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.stiv"))
}

/// Rows already logged up to and including `step`, so a resumed run continues the same
/// log.
fn kept_rows(path: &Path, step: u64) -> Result<Vec<LossRow>> {
    if !path.exists() {
        return Ok(vec![]);
    }
    let mut rows = vec![];
    for row in csv::Reader::from_path(path)?.deserialize::<LossRow>() {
        let row = row?;
        if row.step <= step {
            rows.push(row);
        }
    }
    Ok(rows)
}

fn unmasked(config: &StivConfig) -> StivConfig {
    StivConfig {
        mask_ratio: 0.0,
        ..config.clone()
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let run = RunConfig::load(&args.config)?;
    let run_json = serde_json::to_value(&run).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;

    let (train_clips, heldout) = corpus(&run.data)?;
    let limit = run.overfit_clips.unwrap_or(train_clips.len()).min(train_clips.len());
    let data = train_clips[..limit]
        .iter()
        .map(TrainExample::from_clip)
        .collect::<stiv::Result<Vec<TrainExample<f32>>>>()?;

    let mut trainer = match &args.resume {
        Some(path) => Checkpoint::load(path)?.trainer().map_err(|e| match e {
            CliError::Checkpoint { detail, .. } => CliError::Checkpoint {
                path: path.clone(),
                detail,
            },
            e => e,
        })?,
        None => {
            let model = StivModel::<f32>::new(run.model.clone(), &mut RngState::new(run.seed))?;
            Trainer::new(model, run.train.clone())?
        }
    };

    let log_path = args.out_dir.join("loss.csv");
    let previous = kept_rows(&log_path, trainer.step_count())?;
    let mut log = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&log_path)?;
    log.write_record(["step", "loss", "grad_norm", "lr"])?;
    for row in &previous {
        log.serialize(row)?;
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;

    let mut last: Option<StepStats> = None;
    while trainer.step_count() < run.steps {
        if run.unmask_after.is_some_and(|u| trainer.step_count() >= u) && trainer.model.config.mask_ratio > 0.0 {
            trainer.reconfigure(unmasked(&trainer.model.config))?;
        }
        let stats = trainer.step(&data)?;
        log.serialize(LossRow {
            step: stats.step,
            loss: stats.loss,
            grad_norm: stats.grad_norm,
            lr: stats.lr,
        })?;
        if run.checkpoint_every > 0 && stats.step % run.checkpoint_every == 0 {
            log.flush().map_err(|e| CliError::io(&log_path, e))?;
            Checkpoint::from_trainer(&trainer, Some(run_json.clone())).save(&checkpoint_path(&args.out_dir, stats.step))?;
        }
        last = Some(stats);
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    let final_path = args.out_dir.join("final.stiv");
    Checkpoint::from_trainer(&trainer, Some(run_json)).save(&final_path)?;

    let eval = if run.eval.enabled && !heldout.is_empty() {
        let model = if run.eval.use_ema { trainer.ema_model()? } else { trainer.model.clone() };
        let n = run.eval.max_clips.unwrap_or(heldout.len()).min(heldout.len());
        let opts = EvalOptions {
            modes: run.eval.modes.clone(),
            guidance: run.guidance,
            sampler: run.sampler,
            seed: run.seed,
            ..EvalOptions::default()
        };
        let report = eval_suite(&model, &heldout[..n], &opts)?;
        let path = args.out_dir.join("eval.json");
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Some(report)
    } else {
        None
    };
    Ok(TrainSummary {
        steps: trainer.step_count(),
        final_loss: last.map(|s| s.loss),
        checkpoint: final_path,
        eval,
    })
}
