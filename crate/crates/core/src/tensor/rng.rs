use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Real, Tensor};

/// Counter-based random stream: `(seed, counter)` fully determines every future draw.
///
/// Each draw re-seeks a ChaCha8 stream to `counter` and writes back the advanced word
/// position, so the state is two plain integers that can be checkpointed and resumed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    fn with_stream<R>(&mut self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.counter as u128);
        let out = f(&mut rng);
        self.counter = rng.get_word_pos() as u64;
        out
    }

    /// I.i.d. standard normal draws.
    pub fn gaussian<E: Real>(&mut self, shape: &[usize]) -> Tensor<E> {
        let n: usize = shape.iter().product();
        let data = self.with_stream(|rng| {
            (0..n)
                .map(|_| E::from_f64(rng.sample::<f64, _>(StandardNormal)))
                .collect()
        });
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.with_stream(|rng| rng.random::<f64>())
    }

    pub fn uniform_tensor<E: Real>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<E> {
        let n: usize = shape.iter().product();
        let data = self.with_stream(|rng| {
            (0..n)
                .map(|_| E::from_f64(lo + (hi - lo) * rng.random::<f64>()))
                .collect()
        });
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.with_stream(|rng| rng.random_range(0..n))
    }

    /// Index of a draw from unnormalized non-negative `weights`.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// `k` distinct indices from `0..n`, sorted ascending.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut picked = self.with_stream(|rng| rand::seq::index::sample(rng, n, k).into_vec());
        picked.sort_unstable();
        picked
    }

    /// Independent child stream; advances this stream by one draw.
    pub fn fork(&mut self) -> RngState {
        let seed = self.with_stream(|rng| rng.random::<u64>());
        RngState::new(seed)
    }
}
