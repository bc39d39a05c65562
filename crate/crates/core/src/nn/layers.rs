use crate::error::Result;
use crate::tensor::{Real, Var};

use super::params::{Bound, Init, ParamBuilder, ParamId};

/// Epsilon shared by every normalization in the network.
pub const NORM_EPS: f64 = 1e-6;

pub fn rms_norm<'t, E: Real>(x: &Var<'t, E>, gain: &Var<'t, E>) -> Result<Var<'t, E>> {
    x.rms_norm(gain, NORM_EPS)
}

pub fn stateless_layer_norm<'t, E: Real>(x: &Var<'t, E>) -> Result<Var<'t, E>> {
    x.layer_norm(NORM_EPS)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<E: Real>(pb: &mut ParamBuilder<'_, E>, d_in: usize, d_out: usize, init: Init) -> Self {
        let weight = pb.param("weight", &[d_in, d_out], init);
        let bias = Some(pb.param("bias", &[d_out], Init::Zeros));
        Self { weight, bias }
    }

    pub fn forward<'t, E: Real>(&self, p: &Bound<'t, E>, x: &Var<'t, E>) -> Result<Var<'t, E>> {
        let y = x.matmul(p.get(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.get(b)),
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron with 4x expansion and tanh-approximated GELU.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_RATIO: usize = 4;

impl Mlp {
    pub fn new<E: Real>(pb: &mut ParamBuilder<'_, E>, dim: usize) -> Self {
        Self {
            fc1: Linear::new(&mut pb.sub("fc1"), dim, MLP_RATIO * dim, Init::Xavier),
            fc2: Linear::new(&mut pb.sub("fc2"), MLP_RATIO * dim, dim, Init::Xavier),
        }
    }

    pub fn forward<'t, E: Real>(&self, p: &Bound<'t, E>, x: &Var<'t, E>) -> Result<Var<'t, E>> {
        let h = self.fc1.forward(p, x)?.gelu()?;
        self.fc2.forward(p, &h)
    }
}

/// Scale, shift and gate applied around a sandwich-normed sublayer. Each tensor must
/// broadcast against the sublayer input.
#[derive(Clone)]
pub struct Modulation<'t, E: Real> {
    pub scale: Var<'t, E>,
    pub shift: Var<'t, E>,
    pub gate: Var<'t, E>,
}

/// `x + gate · norm(inner(scale · norm(x) + shift))`.
///
/// `None` modulation is the fixed identity (scale 1, shift 0, gate 1), which skips the
/// three element-wise ops; the result is bit-identical to applying them.
pub fn sandwich<'t, E: Real>(
    x: &Var<'t, E>,
    modulation: Option<&Modulation<'t, E>>,
    inner: impl FnOnce(&Var<'t, E>) -> Result<Var<'t, E>>,
) -> Result<Var<'t, E>> {
    let mut h = stateless_layer_norm(x)?;
    if let Some(m) = modulation {
        h = h.mul(&m.scale)?.add(&m.shift)?;
    }
    let mut h = stateless_layer_norm(&inner(&h)?)?;
    if let Some(m) = modulation {
        h = h.mul(&m.gate)?;
    }
    x.add(&h)
}
