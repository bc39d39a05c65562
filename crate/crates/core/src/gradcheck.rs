//! Finite-difference gradient checking.

use crate::error::Result;
use crate::tensor::{Real, RngState, Tape, Tensor, Var};

/// A scalar function of several tensors, evaluable at any precision.
pub trait ScalarFn {
    fn eval<'t, E: Real>(&self, inputs: &[Var<'t, E>]) -> Result<Var<'t, E>>;
}

/// Worst per-tensor relative error between analytic and numerical gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Coordinates probed per input; `None` probes all of them.
    pub probes: Option<usize>,
    /// Error denominators never drop below this, guarding near-zero gradients.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            probes: None,
            floor: 1e-10,
        }
    }
}

fn value_at<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::inference();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f.eval(&vars)?.value().item())
}

/// Analytic gradient at precision `E`, returned in 64-bit.
pub fn analytic<E: Real, F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let tape = Tape::<E>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.cast())).collect();
    let out = f.eval(&vars)?;
    let refs: Vec<_> = vars.iter().collect();
    Ok(tape.grad(&out, &refs)?.iter().map(Tensor::cast).collect())
}

/// Central difference with step `1e-3·(1 + |θ|)`, refined by one Richardson step
/// (combining steps h and h/2) so the truncation error is fourth order.
pub fn numeric_coordinate<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>], which: usize, index: usize) -> Result<f64> {
    let theta = inputs[which].data()[index];
    let h = 1e-3 * (1.0 + theta.abs());
    let mut probe = inputs.to_vec();
    let mut at = |delta: f64| -> Result<f64> {
        probe[which].data_mut()[index] = theta + delta;
        value_at(f, &probe)
    };
    let d1 = (at(h)? - at(-h)?) / (2.0 * h);
    let d2 = (at(h / 2.0)? - at(-h / 2.0)?) / h;
    Ok((4.0 * d2 - d1) / 3.0)
}

impl GradCheck {
    /// Compares the `E`-precision analytic gradient with a 64-bit numerical oracle.
    pub fn run<E: Real, F: ScalarFn>(&self, f: &F, inputs: &[Tensor<f64>], rng: &mut RngState) -> Result<GradReport> {
        let grads = analytic::<E, F>(f, inputs)?;
        let mut report = GradReport {
            max_rel_err: 0.0,
            worst_input: 0,
        };
        for (which, (x, g)) in inputs.iter().zip(&grads).enumerate() {
            let coords: Vec<usize> = match self.probes {
                Some(k) if k < x.numel() => rng.subset(x.numel(), k),
                _ => (0..x.numel()).collect(),
            };
            let (mut diff, mut a_norm, mut n_norm) = (0.0f64, 0.0f64, 0.0f64);
            for &i in &coords {
                let n = numeric_coordinate(f, inputs, which, i)?;
                let a = g.data()[i];
                diff += (a - n).powi(2);
                a_norm += a * a;
                n_norm += n * n;
            }
            let rel = diff.sqrt() / a_norm.sqrt().max(n_norm.sqrt()).max(self.floor);
            if rel > report.max_rel_err {
                report = GradReport {
                    max_rel_err: rel,
                    worst_input: which,
                };
            }
        }
        Ok(report)
    }
}

/// `sum(out ⊙ weights)` reduction that turns a tensor-valued function into a scalar
/// one with non-degenerate gradients.
pub fn project<'t, E: Real>(out: &Var<'t, E>, weights: &Tensor<f64>) -> Result<Var<'t, E>> {
    let w = out.tape().constant(weights.cast());
    out.mul(&w)?.sum()
}
