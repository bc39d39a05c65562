//! Optimization loop and progressive initialization.

mod optim;
pub mod surgery;

pub use optim::{clip_grad_norm, EmaState, OptimConfig, Optimizer, OptimizerKind, ParamState};
pub use surgery::{extend_frames_init, init_from_both, init_t2v_from_t2i, AuditMap, Origin, Provenance, RopeMode};

use serde::{Deserialize, Serialize};

use crate::conditioning::{apply_frame_replacement, sample_training_condition, LossMask, TaskKind, TaskMode};
use crate::error::{Result, StivError};
use crate::flow::{fm_loss, interpolant, velocity_target};
use crate::model::{Condition, ImageCondition, MaskAxis, MicroConditions, ModelInput, StivModel, TextCondition, TokenMask, VideoLatent};
use crate::synth::Clip;
use crate::tensor::{Real, RngState, Tape, Tensor};

/// How training times are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimeSampling {
    Uniform,
    /// `sigmoid(N(mean, std))`.
    LogitNormal { mean: f64, std: f64 },
}

impl TimeSampling {
    pub fn draw(&self, rng: &mut RngState) -> f64 {
        match *self {
            TimeSampling::Uniform => rng.uniform(),
            TimeSampling::LogitNormal { mean, std } => {
                let z = rng.gaussian::<f64>(&[1]).item();
                1.0 / (1.0 + (-(mean + std * z)).exp())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub ema_decay: f64,
    /// Task modes mixed into training batches.
    pub modes: Vec<TaskKind>,
    /// Relative weight of each entry of `modes`; empty means uniform.
    pub mode_weights: Vec<f64>,
    pub time_sampling: TimeSampling,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            batch_size: 16,
            ema_decay: 0.9999,
            modes: vec![TaskKind::T2v, TaskKind::Ti2v],
            mode_weights: vec![],
            time_sampling: TimeSampling::Uniform,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(StivError::Invalid("at least one training mode is required".into()));
        }
        if !self.mode_weights.is_empty() && self.mode_weights.len() != self.modes.len() {
            return Err(StivError::Invalid(format!(
                "{} mode weights for {} modes",
                self.mode_weights.len(),
                self.modes.len()
            )));
        }
        if self.mode_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || 
            (!self.mode_weights.is_empty() && self.mode_weights.iter().sum::<f64>() <= 0.0)
        {
            return Err(StivError::Invalid("mode weights must be non-negative with a positive sum".into()));
        }
        if self.batch_size == 0 {
            return Err(StivError::Invalid("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(StivError::Invalid(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        Ok(())
    }

    fn weights(&self) -> Vec<f64> {
        if self.mode_weights.is_empty() {
            vec![1.0; self.modes.len()]
        } else {
            self.mode_weights.clone()
        }
    }
}

/// A clean clip latent with its caption.
#[derive(Clone, Debug)]
pub struct TrainExample<E> {
    /// `[T, H, W, C]`.
    pub x1: Tensor<E>,
    pub tokens: Vec<usize>,
    pub micro: MicroConditions,
}

impl<E: Real> TrainExample<E> {
    pub fn from_clip(clip: &Clip) -> Result<Self> {
        Ok(Self {
            x1: clip.latent()?,
            tokens: clip.tokens.clone(),
            micro: clip.micro,
        })
    }
}

/// A fully assembled training batch.
#[derive(Clone, Debug)]
pub struct PreparedBatch<E> {
    pub input: ModelInput<E>,
    pub target: Tensor<E>,
    pub masks: Vec<LossMask>,
    pub modes: Vec<TaskMode>,
    pub token_mask: Option<TokenMask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    /// Before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// Model, optimizer, EMA and random stream of a training run.
#[derive(Clone, Debug)]
pub struct Trainer<E> {
    pub model: StivModel<E>,
    pub opt: Optimizer<E>,
    pub ema: EmaState<E>,
    pub config: TrainConfig,
    pub rng: RngState,
}

impl<E: Real> Trainer<E> {
    pub fn new(model: StivModel<E>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            opt: Optimizer::new(config.optim, &model.params),
            ema: EmaState::new(config.ema_decay, &model.params),
            rng: RngState::new(config.seed),
            model,
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    /// The model with EMA weights.
    pub fn ema_model(&self) -> Result<StivModel<E>> {
        StivModel::from_params(self.model.config.clone(), self.ema.apply(&self.model.params)?)
    }

    /// Draws a batch from `data`, then for each example: a task mode, condition
    /// dropout, a time and noise, the interpolant with frame replacement, and the
    /// loss mask. Adds a token mask when the model's mask ratio is positive.
    pub fn prepare_batch(&mut self, data: &[TrainExample<E>]) -> Result<PreparedBatch<E>> {
        if data.is_empty() {
            return Err(StivError::Invalid("training set is empty".into()));
        }
        let cfg = self.model.config.clone();
        let weights = self.config.weights();
        let n = self.config.batch_size;
        let (mut xs, mut targets, mut masks, mut modes) = (vec![], vec![], vec![], vec![]);
        let (mut ts, mut micro, mut tokens) = (vec![], vec![], vec![]);
        for _ in 0..n {
            let ex = &data[self.rng.below(data.len())];
            let frames = ex.x1.shape()[0];
            let kind = self.config.modes[self.rng.weighted(&weights)];
            let mode = TaskMode::new(kind, frames)?;
            let image = if mode.needs_image() {
                Some(ImageCondition::from_clip(&ex.x1, mode.pinned_frames())?)
            } else {
                None
            };
            let full = Condition {
                text: Some(TextCondition {
                    tokens: ex.tokens.clone(),
                }),
                image,
            };
            let (cond, mode) = sample_training_condition(&mut self.rng, &full, &mode, &cfg);
            let t = self.config.time_sampling.draw(&mut self.rng);
            let eps = self.rng.gaussian::<E>(ex.x1.shape());
            let mut m = ex.micro;
            m.sampling_stride = mode.sampling_stride();
            let x_t = VideoLatent::new(interpolant(&ex.x1, &eps, t)?, m)?;
            let (x_t, mask) = apply_frame_replacement(&x_t, cond.image.as_ref(), &mode, cfg.first_frame_loss)?;
            xs.push(x_t.data);
            targets.push(velocity_target(&ex.x1, &eps)?);
            masks.push(mask);
            modes.push(mode);
            ts.push(t);
            micro.push(m);
            tokens.push(cond.tokens());
        }
        let input = ModelInput {
            x: Tensor::stack(&xs)?,
            t: ts,
            micro,
            tokens,
        };
        let token_mask = if cfg.mask_ratio > 0.0 {
            let shape = input.x.shape();
            let len = match cfg.mask_axis {
                MaskAxis::Spatial => (shape[2] / cfg.spatial_patch) * (shape[3] / cfg.spatial_patch),
                MaskAxis::Temporal => shape[1] / cfg.temporal_patch,
            };
            Some(TokenMask::sample(cfg.mask_ratio, cfg.mask_axis, n, len, &mut self.rng)?)
        } else {
            None
        };
        Ok(PreparedBatch {
            input,
            target: Tensor::stack(&targets)?,
            masks,
            modes,
            token_mask,
        })
    }

    /// Masked flow-matching loss of `batch` and its parameter gradients.
    pub fn loss_and_grads(&self, batch: &PreparedBatch<E>) -> Result<(f64, Vec<Tensor<E>>)> {
        let tape = Tape::new();
        let p = self.model.params.bind(&tape);
        let pred = self.model.forward(&p, &batch.input, batch.token_mask.as_ref())?;
        let loss = fm_loss(&pred, &batch.target, &batch.masks)?;
        let grads = tape.grad(&loss, &p.vars().iter().collect::<Vec<_>>())?;
        Ok((loss.value().item().to_f64(), grads))
    }

    /// One optimization step: batch, forward, loss, backward, clip, update, EMA.
    pub fn step(&mut self, data: &[TrainExample<E>]) -> Result<StepStats> {
        let step = self.opt.step + 1;
        let batch = self.prepare_batch(data)?;
        let (loss, mut grads) = self.loss_and_grads(&batch).map_err(|e| match e {
            StivError::NonFinite { op } => StivError::NonFinite {
                op: format!("{op} at training step {step}"),
            },
            e => e,
        })?;
        if !loss.is_finite() {
            return Err(StivError::NonFinite {
                op: format!("loss at training step {step}"),
            });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.optim.clip_norm);
        if !grad_norm.is_finite() {
            return Err(StivError::NonFinite {
                op: format!("gradient norm at training step {step}"),
            });
        }
        let lr = self.opt.update(&mut self.model.params, &grads)?;
        self.ema.update(&self.model.params)?;
        Ok(StepStats {
            step,
            loss,
            grad_norm,
            lr,
        })
    }

    /// Swaps the architecture config (e.g. mask ratio 0.5 → 0) keeping every tensor and
    /// all optimizer state.
    pub fn reconfigure(&mut self, config: crate::model::StivConfig) -> Result<()> {
        self.model = self.model.with_config(config)?;
        Ok(())
    }
}
