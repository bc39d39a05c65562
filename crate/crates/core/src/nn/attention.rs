use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Var};

use super::layers::{rms_norm, Linear};
use super::params::{Bound, Init, ParamBuilder, ParamId};
use super::rope::{rope_apply, RopeAngles};

/// Multi-head attention with RMS-normalized queries and keys.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub n_heads: usize,
    pub head_dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub q_gain: ParamId,
    pub k_gain: ParamId,
    pub causal: bool,
}

pub struct AttentionSpec {
    pub dim: usize,
    pub kv_dim: usize,
    pub n_heads: usize,
    pub causal: bool,
    /// Zero output projection, making the freshly built path contribute nothing.
    pub zero_out: bool,
}

impl Attention {
    pub fn new<E: Real>(pb: &mut ParamBuilder<'_, E>, spec: AttentionSpec) -> Result<Self> {
        let AttentionSpec {
            dim,
            kv_dim,
            n_heads,
            causal,
            zero_out,
        } = spec;
        if n_heads == 0 || dim % n_heads != 0 {
            return shape_err("attention", format!("{dim} not divisible by {n_heads} heads"));
        }
        let head_dim = dim / n_heads;
        let out_init = if zero_out { Init::Zeros } else { Init::Xavier };
        Ok(Self {
            n_heads,
            head_dim,
            q: Linear::new(&mut pb.sub("q"), dim, dim, Init::Xavier),
            k: Linear::new(&mut pb.sub("k"), kv_dim, dim, Init::Xavier),
            v: Linear::new(&mut pb.sub("v"), kv_dim, dim, Init::Xavier),
            out: Linear::new(&mut pb.sub("out"), dim, dim, out_init),
            q_gain: pb.param("q_norm.gain", &[head_dim], Init::Ones),
            k_gain: pb.param("k_norm.gain", &[head_dim], Init::Ones),
            causal,
        })
    }

    /// `[G, L, D] -> [G, H, L, hd]`
    fn split_heads<'t, E: Real>(&self, x: &Var<'t, E>) -> Result<Var<'t, E>> {
        let s = x.shape();
        x.reshape(&[s[0], s[1], self.n_heads, self.head_dim])?
            .permute(&[0, 2, 1, 3])
    }

    /// Attention of `x` (`[G, Lq, D]`) over `ctx` (`[G, Lk, Dkv]`). `rope` applies to
    /// both queries and keys and therefore requires `Lq == Lk`.
    pub fn forward<'t, E: Real>(
        &self,
        p: &Bound<'t, E>,
        x: &Var<'t, E>,
        ctx: &Var<'t, E>,
        rope: Option<&RopeAngles<E>>,
    ) -> Result<Var<'t, E>> {
        if x.shape().len() != 3 || ctx.shape().len() != 3 || x.shape()[0] != ctx.shape()[0] {
            return shape_err("attention", format!("{:?} over {:?}", x.shape(), ctx.shape()));
        }
        let (g, lq) = (x.shape()[0], x.shape()[1]);
        let q = self.split_heads(&self.q.forward(p, x)?)?;
        let k = self.split_heads(&self.k.forward(p, ctx)?)?;
        let v = self.split_heads(&self.v.forward(p, ctx)?)?;
        let mut q = rms_norm(&q, p.get(self.q_gain))?;
        let mut k = rms_norm(&k, p.get(self.k_gain))?;
        if let Some(angles) = rope {
            q = rope_apply(&q, angles)?;
            k = rope_apply(&k, angles)?;
        }
        let q = q.scale(E::from_f64(1.0 / (self.head_dim as f64).sqrt()))?;
        let weights = q.matmul_t(&k)?.softmax(self.causal)?;
        let h = weights
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[g, lq, self.n_heads * self.head_dim])?;
        self.out.forward(p, &h)
    }

    pub fn self_attention<'t, E: Real>(
        &self,
        p: &Bound<'t, E>,
        x: &Var<'t, E>,
        rope: Option<&RopeAngles<E>>,
    ) -> Result<Var<'t, E>> {
        self.forward(p, x, x, rope)
    }
}

/// Attention within each frame: `[B, T, S, D]` folded to `[B·T, S, D]`. `rope` holds
/// one table per sample (or one shared table) over the `S` grid sites.
pub fn spatial_attention<'t, E: Real>(
    attn: &Attention,
    p: &Bound<'t, E>,
    tokens: &Var<'t, E>,
    rope: &RopeAngles<E>,
) -> Result<Var<'t, E>> {
    let s = tokens.shape().to_vec();
    let [b, t, n, d] = s[..] else {
        return shape_err("spatial_attention", format!("{s:?}"));
    };
    let folded = tokens.reshape(&[b * t, n, d])?;
    attn.self_attention(p, &folded, Some(rope))?.reshape(&s)
}

/// Attention across frames at each site: `[B, T, S, D]` folded to `[B·S, T, D]`.
pub fn temporal_attention<'t, E: Real>(
    attn: &Attention,
    p: &Bound<'t, E>,
    tokens: &Var<'t, E>,
    rope: &RopeAngles<E>,
) -> Result<Var<'t, E>> {
    let s = tokens.shape().to_vec();
    let [b, t, n, d] = s[..] else {
        return shape_err("temporal_attention", format!("{s:?}"));
    };
    let folded = tokens.permute(&[0, 2, 1, 3])?.reshape(&[b * n, t, d])?;
    attn.self_attention(p, &folded, Some(rope))?
        .reshape(&[b, n, t, d])?
        .permute(&[0, 2, 1, 3])
}

/// Per-sample text sequences grouped by length so each group attends in one batch.
pub struct TextBatch<'t, E: Real> {
    batch: usize,
    groups: Vec<(Rc<Vec<Vec<usize>>>, Var<'t, E>)>,
}

impl<'t, E: Real> TextBatch<'t, E> {
    /// `texts[b]` is the `[L_b, D_text]` sequence of sample `b`.
    pub fn new(texts: &[Var<'t, E>]) -> Result<Self> {
        let mut by_len: Vec<(usize, Vec<usize>)> = Vec::new();
        for (b, t) in texts.iter().enumerate() {
            if t.shape().len() != 2 || t.shape()[0] == 0 {
                return shape_err("cross_attention", format!("text sequence {:?}", t.shape()));
            }
            let len = t.shape()[0];
            match by_len.iter_mut().find(|(l, _)| *l == len) {
                Some((_, members)) => members.push(b),
                None => by_len.push((len, vec![b])),
            }
        }
        let mut groups = Vec::with_capacity(by_len.len());
        for (len, members) in by_len {
            let parts: Vec<Var<'t, E>> = members.iter().map(|&b| texts[b].clone()).collect();
            let dt = parts[0].shape()[1];
            let stacked = Var::concat(&parts)?.reshape(&[members.len(), len, dt])?;
            groups.push((Rc::new(vec![members]), stacked));
        }
        Ok(Self {
            batch: texts.len(),
            groups,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Queries from every token of `x` (`[B, ..., D]`), keys and values from the text.
pub fn cross_attention<'t, E: Real>(
    attn: &Attention,
    p: &Bound<'t, E>,
    x: &Var<'t, E>,
    text: &TextBatch<'t, E>,
) -> Result<Var<'t, E>> {
    let s = x.shape().to_vec();
    let b = s[0];
    if b != text.batch {
        return shape_err("cross_attention", format!("batch {b} vs {} texts", text.batch));
    }
    let d = *s.last().unwrap();
    let n = x.value().numel() / (b * d);
    let flat = x.reshape(&[b, n, d])?;
    let mut out: Option<Var<'t, E>> = None;
    for (members, seq) in &text.groups {
        let y = if members[0].len() == b {
            attn.forward(p, &flat, seq, None)?
        } else {
            let xs = flat.index_select(0, members.clone())?;
            attn.forward(p, &xs, seq, None)?.scatter(0, members.clone(), b)?
        };
        out = Some(match out {
            Some(acc) => acc.add(&y)?,
            None => y,
        });
    }
    out.expect("non-empty batch").reshape(&s)
}
