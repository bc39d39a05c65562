//! Flow-matching objective, guidance, velocity/score conversion and the Euler sampler.

use serde::{Deserialize, Serialize};

use crate::conditioning::{pin_state, LossMask, TaskMode};
use crate::error::{shape_err, Result, StivError};
use crate::model::{Condition, MicroConditions, ModelInput, StivModel, VideoLatent};
use crate::tensor::{Real, RngState, Tensor, Var};

/// Default JIT guidance scale.
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;
/// Scales searched for each of the two SIT guidance weights.
pub const SIT_GRID_SCALES: [f64; 5] = [1.1, 1.5, 4.5, 7.5, 10.5];
/// Distance from `t = 1` where the score conversion stops.
pub const DEFAULT_DELTA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceScheme {
    None,
    Jit,
    Sit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub scheme: GuidanceScheme,
    /// Joint scale.
    pub s: f64,
    /// Image scale of the separate scheme.
    pub s1: f64,
    /// Text scale of the separate scheme.
    pub s2: f64,
    pub renorm: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scheme: GuidanceScheme::Jit,
            s: DEFAULT_GUIDANCE_SCALE,
            s1: DEFAULT_GUIDANCE_SCALE,
            s2: DEFAULT_GUIDANCE_SCALE,
            renorm: false,
        }
    }
}

impl GuidanceConfig {
    pub fn none() -> Self {
        Self {
            scheme: GuidanceScheme::None,
            ..Self::default()
        }
    }

    pub fn jit(s: f64) -> Self {
        Self {
            scheme: GuidanceScheme::Jit,
            s,
            ..Self::default()
        }
    }

    pub fn sit(s1: f64, s2: f64) -> Self {
        Self {
            scheme: GuidanceScheme::Sit,
            s1,
            s2,
            ..Self::default()
        }
    }

    /// Model evaluations per step.
    pub fn branches(&self) -> usize {
        match self.scheme {
            GuidanceScheme::None => 1,
            GuidanceScheme::Jit => 2,
            GuidanceScheme::Sit => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub delta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 25,
            delta: DEFAULT_DELTA,
        }
    }
}

impl SamplerConfig {
    /// Evaluation times `i / n`, clamped to `1 - delta`; each step advances `1 / n`.
    pub fn times(&self) -> Vec<f64> {
        (0..self.n_steps)
            .map(|i| (i as f64 / self.n_steps as f64).min(1.0 - self.delta))
            .collect()
    }
}

fn same_shape<E: Real>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `t·x1 + (1 - t)·eps`.
pub fn interpolant<E: Real>(x1: &Tensor<E>, eps: &Tensor<E>, t: f64) -> Result<Tensor<E>> {
    same_shape("interpolant", x1, eps)?;
    let (a, b) = (E::from_f64(t), E::from_f64(1.0 - t));
    x1.zip_map(eps, |x, e| a * x + b * e)
}

/// `x1 - eps`, the time derivative of [`interpolant`].
pub fn velocity_target<E: Real>(x1: &Tensor<E>, eps: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("velocity_target", x1, eps)?;
    x1.sub(eps)
}

/// Mean squared error over the frames each sample's mask includes. `pred` and
/// `target` are `[B, T, ...]`.
pub fn fm_loss<'t, E: Real>(pred: &Var<'t, E>, target: &Tensor<E>, masks: &[LossMask]) -> Result<Var<'t, E>> {
    same_shape("fm_loss", pred.value(), target)?;
    let s = pred.shape();
    let (b, t) = (s[0], s[1]);
    if masks.len() != b || masks.iter().any(|m| m.frames.len() != t) {
        return shape_err("fm_loss", format!("{} masks for {b} samples of {t} frames", masks.len()));
    }
    let per_frame: usize = s[2..].iter().product();
    let included: usize = masks.iter().map(LossMask::included).sum::<usize>() * per_frame;
    if included == 0 {
        return Err(StivError::Condition("loss mask excludes every frame".into()));
    }
    let w = E::from_f64(1.0 / included as f64);
    let mut wshape = vec![b, t];
    wshape.extend(std::iter::repeat_n(1, s.len() - 2));
    let weights = Tensor::from_fn(&wshape, |i| if masks[i / t].frames[i % t] { w } else { E::ZERO });
    let tape = pred.tape();
    let diff = pred.sub(&tape.constant(target.clone()))?;
    diff.mul(&diff)?.mul(&tape.constant(weights))?.sum()
}

/// `(1 - s)·F_null + s·F_joint`, i.e. `F_null + s·(F_joint - F_null)` written so
/// `s = 0` and `s = 1` return the endpoints exactly.
pub fn jit_cfg<E: Real>(f_null: &Tensor<E>, f_joint: &Tensor<E>, s: f64) -> Result<Tensor<E>> {
    same_shape("jit_cfg", f_null, f_joint)?;
    let (a, b) = (E::from_f64(1.0 - s), E::from_f64(s));
    f_null.zip_map(f_joint, |n, j| a * n + b * j)
}

/// `F_null + s1·(F_img - F_null) + s2·(F_joint - F_img)`.
pub fn sit_cfg<E: Real>(f_null: &Tensor<E>, f_img: &Tensor<E>, f_joint: &Tensor<E>, s1: f64, s2: f64) -> Result<Tensor<E>> {
    same_shape("sit_cfg", f_null, f_img)?;
    same_shape("sit_cfg", f_null, f_joint)?;
    let (a, b, c) = (E::from_f64(1.0 - s1), E::from_f64(s1 - s2), E::from_f64(s2));
    let data = f_null
        .data()
        .iter()
        .zip(f_img.data())
        .zip(f_joint.data())
        .map(|((&n, &i), &j)| a * n + b * i + c * j)
        .collect();
    Tensor::new(f_null.shape(), data)
}

/// Rescales `f_hat` to the global L2 norm of `f_cond`; a zero `f_hat` yields `f_cond`.
pub fn cfg_renorm<E: Real>(f_hat: &Tensor<E>, f_cond: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("cfg_renorm", f_hat, f_cond)?;
    let n = f_hat.norm();
    if n == 0.0 {
        return Ok(f_cond.clone());
    }
    let k = E::from_f64(f_cond.norm() / n);
    Ok(f_hat.map(|v| v * k))
}

/// `t/(1-t)·F - x_t/(1-t)`.
pub fn velocity_to_score<E: Real>(f: &Tensor<E>, x_t: &Tensor<E>, t: f64, delta: f64) -> Result<Tensor<E>> {
    same_shape("velocity_to_score", f, x_t)?;
    if !(0.0..=1.0 - delta).contains(&t) {
        return Err(StivError::Invalid(format!("score undefined at t = {t} (limit {})", 1.0 - delta)));
    }
    let (a, b) = (E::from_f64(t / (1.0 - t)), E::from_f64(1.0 / (1.0 - t)));
    f.zip_map(x_t, |v, x| a * v - b * x)
}

/// Cartesian product of image and text scales, sorted by `(s1, s2)`.
pub fn sit_grid(scales1: &[f64], scales2: &[f64]) -> Vec<(f64, f64)> {
    let mut grid: Vec<(f64, f64)> = scales1.iter().flat_map(|&a| scales2.iter().map(move |&b| (a, b))).collect();
    grid.sort_by(|x, y| x.partial_cmp(y).expect("finite scales"));
    grid
}

/// Anything that maps a batch of states to velocities.
pub trait VelocityField<E: Real> {
    fn velocity(&self, input: &ModelInput<E>) -> Result<Tensor<E>>;
}

impl<E: Real> VelocityField<E> for StivModel<E> {
    fn velocity(&self, input: &ModelInput<E>) -> Result<Tensor<E>> {
        self.predict(input)
    }
}

/// One clip to generate.
#[derive(Clone, Debug)]
pub struct SampleRequest<E> {
    pub cond: Condition<E>,
    pub mode: TaskMode,
    pub micro: MicroConditions,
    /// Seeds the initial noise.
    pub seed: u64,
}

/// Integrates `dx/dt = F̂` from Gaussian noise at `t = 0` with `n_steps` uniform Euler
/// steps, re-pinning condition frames before every evaluation and after the final step.
///
/// The conditional branches see the pinned state. Branches without the image condition
/// see the pinned frames as they would look unconditioned at time `t`, i.e. the
/// interpolant `t·c_I + (1 - t)·eps` of the condition frame with its initial noise.
/// All branches of all requests are evaluated as one batch per step.
pub fn euler_sample<E: Real, F: VelocityField<E>>(
    model: &F,
    requests: &[SampleRequest<E>],
    latent_shape: [usize; 4],
    g: &GuidanceConfig,
    sc: &SamplerConfig,
) -> Result<Vec<VideoLatent<E>>> {
    if sc.n_steps == 0 {
        return Err(StivError::Invalid("n_steps must be at least 1".into()));
    }
    let [t_len, ..] = latent_shape;
    let noise: Vec<Tensor<E>> = requests
        .iter()
        .map(|r| RngState::new(r.seed).gaussian(&latent_shape))
        .collect();
    let mut states: Vec<VideoLatent<E>> = Vec::with_capacity(requests.len());
    for (r, eps) in requests.iter().zip(&noise) {
        if r.mode.frames != t_len {
            return Err(StivError::Condition(format!("{}-frame mode for {t_len}-frame clips", r.mode.frames)));
        }
        let x = VideoLatent::new(eps.clone(), r.micro)?;
        states.push(pin_state(&x, r.cond.image.as_ref(), &r.mode)?);
    }
    let dt = E::from_f64(1.0 / sc.n_steps as f64);
    let nb = g.branches();
    for t in sc.times() {
        let mut xs = Vec::with_capacity(requests.len() * nb);
        let mut tokens = Vec::with_capacity(requests.len() * nb);
        for ((r, x), eps) in requests.iter().zip(&states).zip(&noise) {
            let joint = r.cond.tokens();
            let null = crate::model::text::null_text();
            let unpinned = || -> Result<Tensor<E>> {
                let mut u = x.data.clone();
                if let Some(img) = &r.cond.image {
                    let n = x.frame_len();
                    for (k, &f) in img.frame_indices.iter().enumerate() {
                        let c = &img.frames.data()[k * n..(k + 1) * n];
                        let e = &eps.data()[f * n..(f + 1) * n];
                        let (a, b) = (E::from_f64(t), E::from_f64(1.0 - t));
                        for ((dst, &cv), &ev) in u.data_mut()[f * n..(f + 1) * n].iter_mut().zip(c).zip(e) {
                            *dst = a * cv + b * ev;
                        }
                    }
                }
                Ok(u)
            };
            xs.push(x.data.clone());
            tokens.push(joint);
            match g.scheme {
                GuidanceScheme::None => {}
                GuidanceScheme::Jit => {
                    xs.push(unpinned()?);
                    tokens.push(null);
                }
                GuidanceScheme::Sit => {
                    xs.push(x.data.clone());
                    tokens.push(null.clone());
                    xs.push(unpinned()?);
                    tokens.push(null);
                }
            }
        }
        let input = ModelInput {
            x: Tensor::stack(&xs)?,
            t: vec![t; xs.len()],
            micro: requests.iter().flat_map(|r| std::iter::repeat_n(r.micro, nb)).collect(),
            tokens,
        };
        let v = model.velocity(&input)?;
        for (i, (r, x)) in requests.iter().zip(states.iter_mut()).enumerate() {
            let branch = |k: usize| v.index0(i * nb + k);
            let f_joint = branch(0);
            let mut f = match g.scheme {
                GuidanceScheme::None => f_joint.clone(),
                GuidanceScheme::Jit => jit_cfg(&branch(1), &f_joint, g.s)?,
                GuidanceScheme::Sit => sit_cfg(&branch(2), &branch(1), &f_joint, g.s1, g.s2)?,
            };
            if g.renorm && g.scheme != GuidanceScheme::None {
                f = cfg_renorm(&f, &f_joint)?;
            }
            let next = x.data.zip_map(&f, |a, b| a + dt * b)?;
            if !next.all_finite() {
                return Err(StivError::NonFinite {
                    op: format!("euler step at t = {t}"),
                });
            }
            *x = pin_state(&VideoLatent::new(next, r.micro)?, r.cond.image.as_ref(), &r.mode)?;
        }
    }
    Ok(states)
}
