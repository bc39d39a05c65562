use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, StivError};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adafactor,
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    /// Peak learning rate, reached after `warmup_steps`.
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW only).
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Ceiling on the RMS of an AdaFactor update before momentum, so each step moves a
    /// tensor by at most `lr` in RMS.
    pub update_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adafactor,
            lr: 3e-4,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            update_clip: 1.0,
        }
    }
}

impl OptimConfig {
    /// Large-scale schedule: 1k warmup steps to 2e-4.
    pub fn large_scale() -> Self {
        Self {
            lr: 2e-4,
            warmup_steps: 1000,
            ..Self::default()
        }
    }

    /// Linear warmup to `lr`, constant after. `step` counts from 1.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Scales all gradients by `max_norm / g` when their global L2 norm `g` exceeds
/// `max_norm`. Returns `g`.
pub fn clip_grad_norm<E: Real>(grads: &mut [Tensor<E>], max_norm: f64) -> f64 {
    let g = grads.iter().map(|t| t.norm().powi(2)).sum::<f64>().sqrt();
    if g > max_norm {
        let k = E::from_f64(max_norm / g);
        for t in grads.iter_mut() {
            for v in t.data_mut() {
                *v = *v * k;
            }
        }
    }
    g
}

/// Per-tensor optimizer moments. AdaFactor keeps row and column means of the squared
/// gradient for tensors with at least two axes and a full second moment otherwise;
/// AdamW always keeps the full moment.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState<E> {
    pub m: Tensor<E>,
    pub v: Option<Tensor<E>>,
    pub row: Option<Tensor<E>>,
    pub col: Option<Tensor<E>>,
}

/// `(rows, cols)` when AdaFactor factors this shape.
fn factored(shape: &[usize]) -> Option<(usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let cols = shape[shape.len() - 1];
    Some((shape.iter().product::<usize>() / cols.max(1), cols))
}

impl<E: Real> ParamState<E> {
    fn new(kind: OptimizerKind, shape: &[usize]) -> Self {
        let m = Tensor::zeros(shape);
        match (kind, factored(shape)) {
            (OptimizerKind::Adafactor, Some((r, c))) => Self {
                m,
                v: None,
                row: Some(Tensor::zeros(&[r])),
                col: Some(Tensor::zeros(&[c])),
            },
            _ => Self {
                v: Some(Tensor::zeros(shape)),
                m,
                row: None,
                col: None,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<E> {
    pub config: OptimConfig,
    /// Updates applied so far.
    pub step: u64,
    pub states: Vec<ParamState<E>>,
}

impl<E: Real> Optimizer<E> {
    pub fn new(config: OptimConfig, params: &ParamStore<E>) -> Self {
        Self {
            config,
            step: 0,
            states: params.tensors().iter().map(|t| ParamState::new(config.kind, t.shape())).collect(),
        }
    }

    /// Applies one update and returns the learning rate used.
    pub fn update(&mut self, params: &mut ParamStore<E>, grads: &[Tensor<E>]) -> Result<f64> {
        if grads.len() != self.states.len() || grads.len() != params.len() {
            return shape_err(
                "optimizer",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            );
        }
        self.step += 1;
        let c = self.config;
        let lr = c.lr_at(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), st) in params.tensors_mut().iter_mut().zip(grads).zip(self.states.iter_mut()) {
            if p.shape() != g.shape() {
                return shape_err("optimizer", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            match c.kind {
                OptimizerKind::Adafactor => adafactor(p, g, st, &c, lr, bc2),
                OptimizerKind::Adamw => adamw(p, g, st, &c, lr, 1.0 - c.beta1.powi(self.step as i32), bc2),
            }
            if !p.all_finite() {
                return Err(StivError::NonFinite {
                    op: format!("optimizer step {}", self.step),
                });
            }
        }
        Ok(lr)
    }
}

fn ema(acc: &mut f64, beta: f64, x: f64) {
    *acc = beta * *acc + (1.0 - beta) * x;
}


fn adafactor<E: Real>(p: &mut Tensor<E>, g: &Tensor<E>, st: &mut ParamState<E>, c: &OptimConfig, lr: f64, bc2: f64) {
    let g: Vec<f64> = g.to_f64_vec();
    let vhat: Vec<f64> = match (&mut st.row, &mut st.col, &mut st.v) {
        (Some(row), Some(col), _) => {
            let (r, k) = (row.numel(), col.numel());
            let mut rows = vec![0.0; r];
            let mut cols = vec![0.0; k];
            for i in 0..r {
                for j in 0..k {
                    let sq = g[i * k + j] * g[i * k + j];
                    rows[i] += sq / k as f64;
                    cols[j] += sq / r as f64;
                }
            }
            let mut rv: Vec<f64> = row.to_f64_vec();
            let mut cv: Vec<f64> = col.to_f64_vec();
            rv.iter_mut().zip(&rows).for_each(|(a, &x)| ema(a, c.beta2, x));
            cv.iter_mut().zip(&cols).for_each(|(a, &x)| ema(a, c.beta2, x));
            let mean_r = rv.iter().sum::<f64>() / r as f64;
            let vhat = (0..r * k)
                .map(|n| {
                    if mean_r > 0.0 {
                        rv[n / k] * cv[n % k] / mean_r / bc2
                    } else {
                        0.0
                    }
                })
                .collect();
            *row = Tensor::from_fn(&[r], |i| E::from_f64(rv[i]));
            *col = Tensor::from_fn(&[k], |j| E::from_f64(cv[j]));
            vhat
        }
        (_, _, Some(v)) => {
            let mut vv = v.to_f64_vec();
            vv.iter_mut().zip(&g).for_each(|(a, &x)| ema(a, c.beta2, x * x));
            let vhat = vv.iter().map(|a| a / bc2).collect();
            *v = Tensor::from_fn(v.shape(), |i| E::from_f64(vv[i]));
            vhat
        }
        _ => unreachable!("every state holds a second moment"),
    };
    let mut u: Vec<f64> = g.iter().zip(&vhat).map(|(&gi, &vi)| gi / (vi.sqrt() + c.eps)).collect();
    let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len().max(1) as f64).sqrt();
    if rms > c.update_clip {
        let k = c.update_clip / rms;
        u.iter_mut().for_each(|x| *x *= k);
    }
    let m = st.m.data_mut();
    for ((pi, mi), &ui) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(&u) {
        let mut acc = mi.to_f64();
        ema(&mut acc, c.beta1, ui);
        *mi = E::from_f64(acc);
        *pi = E::from_f64(pi.to_f64() - lr * acc);
    }
}

fn adamw<E: Real>(
    p: &mut Tensor<E>,
    g: &Tensor<E>,
    st: &mut ParamState<E>,
    c: &OptimConfig,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    let v = st.v.as_mut().expect("adamw keeps a full second moment");
    for (((pi, mi), vi), gi) in p
        .data_mut()
        .iter_mut()
        .zip(st.m.data_mut())
        .zip(v.data_mut())
        .zip(g.data())
    {
        let g = gi.to_f64();
        let (mut m, mut s) = (mi.to_f64(), vi.to_f64());
        ema(&mut m, c.beta1, g);
        ema(&mut s, c.beta2, g * g);
        *mi = E::from_f64(m);
        *vi = E::from_f64(s);
        let step = (m / bc1) / ((s / bc2).sqrt() + c.eps) + c.weight_decay * pi.to_f64();
        *pi = E::from_f64(pi.to_f64() - lr * step);
    }
}

/// Exponential moving average of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<E> {
    pub decay: f64,
    pub shadow: Vec<Tensor<E>>,
}

impl<E: Real> EmaState<E> {
    /// Starts the average at the current parameters.
    pub fn new(decay: f64, params: &ParamStore<E>) -> Self {
        Self {
            decay,
            shadow: params.tensors().to_vec(),
        }
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`.
    pub fn update(&mut self, params: &ParamStore<E>) -> Result<()> {
        if params.len() != self.shadow.len() {
            return shape_err("ema", format!("{} parameters for {} shadows", params.len(), self.shadow.len()));
        }
        let (a, b) = (E::from_f64(self.decay), E::from_f64(1.0 - self.decay));
        for (s, p) in self.shadow.iter_mut().zip(params.tensors()) {
            *s = s.zip_map(p, |x, y| a * x + b * y)?;
        }
        Ok(())
    }

    /// A copy of `params` holding the averaged values.
    pub fn apply(&self, params: &ParamStore<E>) -> Result<ParamStore<E>> {
        let mut out = params.clone();
        for (dst, s) in out.tensors_mut().iter_mut().zip(&self.shadow) {
            if dst.shape() != s.shape() {
                return shape_err("ema", format!("shadow {:?} for parameter {:?}", s.shape(), dst.shape()));
            }
            *dst = s.clone();
        }
        Ok(out)
    }
}
