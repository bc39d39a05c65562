use crate::error::Result;
use crate::nn::{stateless_layer_norm, Init, Linear, Modulation, ParamBuilder};
use crate::nn::Bound;
use crate::tensor::{Real, Tensor, Var};

use super::latent::MicroConditions;

const MAX_PERIOD: f64 = 10_000.0;

/// `[cos(v·f_0), .., cos(v·f_{n-1}), sin(v·f_0), .., sin(v·f_{n-1})]` with
/// `f_i = MAX_PERIOD^(-i/n)` and `n = dim / 2`.
pub fn sinusoid(v: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs = (0..half).map(|i| (-MAX_PERIOD.ln() * i as f64 / half as f64).exp());
    let (cos, sin): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((v * f).cos(), (v * f).sin())).unzip();
    cos.into_iter().chain(sin).collect()
}

/// Scalar embedder: sinusoidal features through `Linear -> SiLU -> Linear`.
#[derive(Clone, Copy, Debug)]
pub struct Embedder {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Embedder {
    fn new<E: Real>(pb: &mut ParamBuilder<'_, E>, d_in: usize, dim: usize) -> Self {
        Self {
            fc1: Linear::new(&mut pb.sub("fc1"), d_in, dim, Init::Xavier),
            fc2: Linear::new(&mut pb.sub("fc2"), dim, dim, Init::Xavier),
        }
    }

    fn forward<'t, E: Real>(&self, p: &Bound<'t, E>, features: &Var<'t, E>) -> Result<Var<'t, E>> {
        let h = self.fc1.forward(p, features)?.silu()?;
        self.fc2.forward(p, &h)
    }
}

/// Embedders whose layer-normalized outputs sum to the singleton condition.
#[derive(Clone, Copy, Debug)]
pub struct SingletonEmbedder {
    pub freq_dim: usize,
    pub timestep: Embedder,
    pub resolution: Embedder,
    pub crop: Embedder,
    pub stride: Embedder,
    pub frames: Embedder,
    pub text: Linear,
}

/// Per-sample inputs of the singleton condition.
pub struct SingletonInput<'a, 't, E: Real> {
    pub t: &'a [f64],
    pub micro: &'a [MicroConditions],
    /// `[B, D_text]`.
    pub pooled_text: &'a Var<'t, E>,
}

impl SingletonEmbedder {
    pub fn new<E: Real>(pb: &mut ParamBuilder<'_, E>, freq_dim: usize, dim: usize, text_dim: usize) -> Self {
        Self {
            freq_dim,
            timestep: Embedder::new(&mut pb.sub("timestep"), freq_dim, dim),
            resolution: Embedder::new(&mut pb.sub("resolution"), 2 * freq_dim, dim),
            crop: Embedder::new(&mut pb.sub("crop"), 2 * freq_dim, dim),
            stride: Embedder::new(&mut pb.sub("stride"), freq_dim, dim),
            frames: Embedder::new(&mut pb.sub("frames"), freq_dim, dim),
            text: Linear::new(&mut pb.sub("text"), text_dim, dim, Init::Xavier),
        }
    }

    fn features<'t, E: Real>(
        &self,
        tape: &'t crate::tensor::Tape<E>,
        rows: impl Iterator<Item = Vec<f64>>,
    ) -> Result<Var<'t, E>> {
        let rows: Vec<Vec<f64>> = rows.collect();
        let width = rows[0].len();
        let flat: Vec<f64> = rows.concat();
        Ok(tape.constant(Tensor::from_f64(&[rows.len(), width], &flat)?))
    }

    /// The six layer-normalized `[B, D]` summands, in the order timestep, resolution,
    /// crop, stride, frame count, pooled text.
    pub fn terms<'t, E: Real>(&self, p: &Bound<'t, E>, input: &SingletonInput<'_, 't, E>) -> Result<Vec<Var<'t, E>>> {
        let tape = input.pooled_text.tape();
        let f = self.freq_dim;
        let pair = |a: u32, b: u32| [sinusoid(a as f64, f), sinusoid(b as f64, f)].concat();
        let micro = input.micro;
        let feats = [
            (self.timestep, self.features(tape, input.t.iter().map(|&t| sinusoid(1000.0 * t, f)))?),
            (
                self.resolution,
                self.features(tape, micro.iter().map(|m| pair(m.original_resolution.0, m.original_resolution.1)))?,
            ),
            (self.crop, self.features(tape, micro.iter().map(|m| pair(m.crop_coords.0, m.crop_coords.1)))?),
            (self.stride, self.features(tape, micro.iter().map(|m| sinusoid(m.sampling_stride as f64, f)))?),
            (self.frames, self.features(tape, micro.iter().map(|m| sinusoid(m.num_frames as f64, f)))?),
        ];
        let mut terms = Vec::with_capacity(6);
        for (embedder, x) in &feats {
            terms.push(stateless_layer_norm(&embedder.forward(p, x)?)?);
        }
        terms.push(stateless_layer_norm(&self.text.forward(p, input.pooled_text)?)?);
        Ok(terms)
    }

    /// Sum of [`Self::terms`], `[B, D]`.
    pub fn forward<'t, E: Real>(&self, p: &Bound<'t, E>, input: &SingletonInput<'_, 't, E>) -> Result<Var<'t, E>> {
        let terms = self.terms(p, input)?;
        let mut acc = terms[0].clone();
        for term in &terms[1..] {
            acc = acc.add(term)?;
        }
        Ok(acc)
    }
}

/// Scale-shift-gate projections shared by every block. Zero-initialized, so a fresh
/// model has unit scale and closed gates.
#[derive(Clone, Copy, Debug)]
pub struct SharedAdaLn {
    pub attn: [Linear; 3],
    pub mlp: [Linear; 3],
}

impl SharedAdaLn {
    pub fn new<E: Real>(pb: &mut ParamBuilder<'_, E>, dim: usize) -> Self {
        let mut lin = |name: &str| Linear::new(&mut pb.sub(name), dim, dim, Init::Zeros);
        Self {
            attn: [lin("attn_scale"), lin("attn_shift"), lin("attn_gate")],
            mlp: [lin("mlp_scale"), lin("mlp_shift"), lin("mlp_gate")],
        }
    }

    /// Modulations for the attention and feed-forward sublayers, each `[B, 1, 1, D]`.
    pub fn forward<'t, E: Real>(
        &self,
        p: &Bound<'t, E>,
        singleton: &Var<'t, E>,
    ) -> Result<(Modulation<'t, E>, Modulation<'t, E>)> {
        let [b, d] = singleton.shape()[..] else {
            unreachable!("singleton is [B, D]")
        };
        let h = singleton.silu()?;
        let one = h.tape().constant(Tensor::ones(&[1]));
        let make = |lins: &[Linear; 3]| -> Result<Modulation<'t, E>> {
            let out = |l: &Linear| l.forward(p, &h)?.reshape(&[b, 1, 1, d]);
            Ok(Modulation {
                scale: out(&lins[0])?.add(&one)?,
                shift: out(&lins[1])?,
                gate: out(&lins[2])?,
            })
        };
        Ok((make(&self.attn)?, make(&self.mlp)?))
    }
}
