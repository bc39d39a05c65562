//! Straight-line reference implementations used as test oracles. Everything works
//! on nested `Vec<f64>` rows read directly from the parameter store by name.
#![allow(dead_code)]

use stiv::model::{MicroConditions, StivConfig};
use stiv::nn::ParamStore;

pub type Rows = Vec<Vec<f64>>;

pub fn param(p: &ParamStore<f64>, name: &str) -> Vec<f64> {
    p.by_name(name).unwrap_or_else(|| panic!("missing {name}")).data().to_vec()
}

pub fn linear(p: &ParamStore<f64>, prefix: &str, x: &Rows) -> Rows {
    let w = p.by_name(&format!("{prefix}.weight")).unwrap();
    let b = param(p, &format!("{prefix}.bias"));
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), din);
            (0..dout)
                .map(|j| b[j] + (0..din).map(|i| row[i] * w.data()[i * dout + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    v.iter().map(|x| (x - mean) / (var + 1e-6).sqrt()).collect()
}

pub fn rms_norm(v: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    v.iter().zip(gain).map(|(x, g)| g * x / (ms + 1e-6).sqrt()).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn map_rows(x: &Rows, f: impl Fn(&[f64]) -> Vec<f64>) -> Rows {
    x.iter().map(|r| f(r)).collect()
}

/// Pair angles for a 1-D position.
pub fn angles_1d(pos: f64, head_dim: usize, scale: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|j| pos * scale / 10_000f64.powf(2.0 * j as f64 / head_dim as f64))
        .collect()
}

/// Pair angles for a grid position: first half of the pairs by row, second by column.
pub fn angles_2d(row: f64, col: f64, head_dim: usize, scale: f64) -> Vec<f64> {
    let quarter = head_dim / 4;
    let freq = |j: usize| 10_000f64.powf(-(2.0 * j as f64) / (head_dim / 2) as f64);
    (0..quarter)
        .map(|j| row * scale * freq(j))
        .chain((0..quarter).map(|j| col * scale * freq(j)))
        .collect()
}

pub fn rotate(v: &[f64], angles: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    for (j, a) in angles.iter().enumerate() {
        let (x0, x1) = (v[2 * j], v[2 * j + 1]);
        out[2 * j] = x0 * a.cos() - x1 * a.sin();
        out[2 * j + 1] = x0 * a.sin() + x1 * a.cos();
    }
    out
}

/// Per-head loop attention of `x` over `ctx`. `angles[i]` are the pair angles of
/// position `i`, applied to queries and keys alike.
pub fn attention(
    p: &ParamStore<f64>,
    prefix: &str,
    x: &Rows,
    ctx: &Rows,
    n_heads: usize,
    causal: bool,
    angles: Option<&Rows>,
) -> Rows {
    let q = linear(p, &format!("{prefix}.q"), x);
    let k = linear(p, &format!("{prefix}.k"), ctx);
    let v = linear(p, &format!("{prefix}.v"), ctx);
    let qg = param(p, &format!("{prefix}.q_norm.gain"));
    let kg = param(p, &format!("{prefix}.k_norm.gain"));
    let d = q[0].len();
    let hd = d / n_heads;
    let mut merged = vec![vec![0.0; d]; x.len()];
    for h in 0..n_heads {
        let head = |m: &Rows, i: usize| m[i][h * hd..(h + 1) * hd].to_vec();
        let prep = |m: &Rows, g: &[f64], i: usize| {
            let r = rms_norm(&head(m, i), g);
            match angles {
                Some(a) => rotate(&r, &a[i]),
                None => r,
            }
        };
        for i in 0..x.len() {
            let qi = prep(&q, &qg, i);
            let visible = if causal { i + 1 } else { ctx.len() };
            let logits: Vec<f64> = (0..visible)
                .map(|j| {
                    let kj = prep(&k, &kg, j);
                    qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, w) in e.iter().enumerate() {
                for c in 0..hd {
                    merged[i][h * hd + c] += w / z * v[j][h * hd + c];
                }
            }
        }
    }
    linear(p, &format!("{prefix}.out"), &merged)
}

pub struct Modulation {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub gate: Vec<f64>,
}

/// `x + gate · LN(inner(scale · LN(x) + shift))` row by row; `None` is identity
/// modulation.
pub fn sandwich(x: &Rows, m: Option<&Modulation>, inner: impl Fn(&Rows) -> Rows) -> Rows {
    let h = map_rows(x, |r| {
        let n = layer_norm(r);
        match m {
            Some(m) => n.iter().enumerate().map(|(i, v)| v * m.scale[i] + m.shift[i]).collect(),
            None => n,
        }
    });
    let y = inner(&h);
    x.iter()
        .zip(&y)
        .map(|(xr, yr)| {
            let n = layer_norm(yr);
            xr.iter()
                .enumerate()
                .map(|(i, v)| v + m.map_or(1.0, |m| m.gate[i]) * n[i])
                .collect()
        })
        .collect()
}

pub fn mlp(p: &ParamStore<f64>, prefix: &str, x: &Rows) -> Rows {
    let h = map_rows(&linear(p, &format!("{prefix}.fc1"), x), |r| r.iter().map(|&v| gelu(v)).collect());
    linear(p, &format!("{prefix}.fc2"), &h)
}

/// One block on a single sample's `[T][S]` token grid.
pub struct BlockEnv<'a> {
    pub n_heads: usize,
    pub causal_temporal: bool,
    pub temporal: bool,
    pub attn_mod: &'a Modulation,
    pub mlp_mod: &'a Modulation,
    pub text: &'a Rows,
    /// Pair angles per site and per token frame.
    pub site_angles: &'a Rows,
    pub frame_angles: &'a Rows,
}

pub fn block(p: &ParamStore<f64>, prefix: &str, grid: &[Rows], env: &BlockEnv) -> Vec<Rows> {
    let (t_len, s_len) = (grid.len(), grid[0].len());
    let mut g: Vec<Rows> = grid
        .iter()
        .map(|frame| {
            sandwich(frame, Some(env.attn_mod), |h| {
                attention(p, &format!("{prefix}.spatial_attn"), h, h, env.n_heads, false, Some(env.site_angles))
            })
        })
        .collect();
    if env.temporal {
        for s in 0..s_len {
            let column: Rows = (0..t_len).map(|t| g[t][s].clone()).collect();
            let out = sandwich(&column, None, |h| {
                attention(
                    p,
                    &format!("{prefix}.temporal_attn"),
                    h,
                    h,
                    env.n_heads,
                    env.causal_temporal,
                    Some(env.frame_angles),
                )
            });
            for t in 0..t_len {
                g[t][s] = out[t].clone();
            }
        }
    }
    g.iter()
        .map(|frame| {
            let f = sandwich(frame, None, |h| {
                attention(p, &format!("{prefix}.cross_attn"), h, env.text, env.n_heads, false, None)
            });
            sandwich(&f, Some(env.mlp_mod), |h| mlp(p, &format!("{prefix}.mlp"), h))
        })
        .collect()
}

pub fn sinusoid(v: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let f = |i: usize| 10_000f64.powf(-(i as f64) / half as f64);
    let mut out: Vec<f64> = (0..half).map(|i| (v * f(i)).cos()).collect();
    out.extend((0..half).map(|i| (v * f(i)).sin()));
    out
}

/// Reference forward of one sample. `x` is `[T][H][W][C]` flattened row-major.
pub fn model_forward(
    cfg: &StivConfig,
    p: &ParamStore<f64>,
    x: &[f64],
    frames: usize,
    t: f64,
    micro: &MicroConditions,
    tokens: &[usize],
) -> Vec<f64> {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let (ps, pt) = (cfg.spatial_patch, cfg.temporal_patch);
    let (tt, rows, cols) = (frames / pt, h / ps, w / ps);
    let d = cfg.hidden_dim;
    let hd = d / cfg.n_heads;
    let patch_vec = |tp: usize, r: usize, cc: usize| -> Vec<f64> {
        let mut v = Vec::new();
        for dt in 0..pt {
            for dy in 0..ps {
                for dx in 0..ps {
                    for ch in 0..c {
                        let (f, y, xx) = (tp * pt + dt, r * ps + dy, cc * ps + dx);
                        v.push(x[((f * h + y) * w + xx) * c + ch]);
                    }
                }
            }
        }
        v
    };
    let mut grid: Vec<Rows> = (0..tt)
        .map(|tp| {
            let patches: Rows = (0..rows * cols).map(|s| patch_vec(tp, s / cols, s % cols)).collect();
            linear(p, "patch_embed", &patches)
        })
        .collect();

    let table = p.by_name("text_embed").unwrap();
    let dt = table.shape()[1];
    let text: Rows = tokens.iter().map(|&i| table.data()[i * dt..(i + 1) * dt].to_vec()).collect();
    let pooled = text.last().unwrap().clone();

    let fd = cfg.freq_dim;
    let emb = |name: &str, feat: Vec<f64>| -> Vec<f64> {
        let h1 = linear(p, &format!("singleton.{name}.fc1"), &vec![feat]);
        let h1 = map_rows(&h1, |r| r.iter().map(|&v| silu(v)).collect());
        layer_norm(&linear(p, &format!("singleton.{name}.fc2"), &h1)[0])
    };
    let pair = |a: u32, b: u32| [sinusoid(a as f64, fd), sinusoid(b as f64, fd)].concat();
    let terms = [
        emb("timestep", sinusoid(1000.0 * t, fd)),
        emb("resolution", pair(micro.original_resolution.0, micro.original_resolution.1)),
        emb("crop", pair(micro.crop_coords.0, micro.crop_coords.1)),
        emb("stride", sinusoid(micro.sampling_stride as f64, fd)),
        emb("frames", sinusoid(micro.num_frames as f64, fd)),
        layer_norm(&linear(p, "singleton.text", &vec![pooled])[0]),
    ];
    let singleton: Vec<f64> = (0..d).map(|i| terms.iter().map(|t| t[i]).sum()).collect();
    let act = vec![singleton.iter().map(|&v| silu(v)).collect::<Vec<_>>()];
    let ada = |name: &str| linear(p, &format!("adaln.{name}"), &act)[0].clone();
    let attn_mod = Modulation {
        scale: ada("attn_scale").iter().map(|v| v + 1.0).collect(),
        shift: ada("attn_shift"),
        gate: ada("attn_gate"),
    };
    let mlp_mod = Modulation {
        scale: ada("mlp_scale").iter().map(|v| v + 1.0).collect(),
        shift: ada("mlp_shift"),
        gate: ada("mlp_gate"),
    };
    let site_angles: Rows = (0..rows * cols)
        .map(|s| angles_2d((s / cols) as f64, (s % cols) as f64, hd, cfg.spatial_rope_scale))
        .collect();
    let frame_angles: Rows = (0..tt).map(|f| angles_1d(f as f64, hd, cfg.temporal_rope_scale)).collect();
    let env = BlockEnv {
        n_heads: cfg.n_heads,
        causal_temporal: cfg.causal_temporal,
        temporal: cfg.temporal,
        attn_mod: &attn_mod,
        mlp_mod: &mlp_mod,
        text: &text,
        site_angles: &site_angles,
        frame_angles: &frame_angles,
    };
    for i in 0..cfg.n_blocks {
        grid = block(p, &format!("blocks.{i}"), &grid, &env);
    }
    for i in 0..cfg.n_decoder_blocks {
        grid = block(p, &format!("decoder.{i}"), &grid, &env);
    }
    let mut out = vec![0.0; frames * h * w * c];
    for (tp, frame) in grid.iter().enumerate() {
        let y = linear(p, "head", &map_rows(frame, layer_norm));
        for (s, patch) in y.iter().enumerate() {
            let (r, cc) = (s / cols, s % cols);
            let mut k = 0;
            for dtt in 0..pt {
                for dy in 0..ps {
                    for dx in 0..ps {
                        for ch in 0..c {
                            let (f, yy, xx) = (tp * pt + dtt, r * ps + dy, cc * ps + dx);
                            out[((f * h + yy) * w + xx) * c + ch] = patch[k];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Replaces every parameter with dense Gaussian values so no path is gated off.
pub fn densify(p: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = stiv::RngState::new(seed);
    for t in p.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = rng.gaussian::<f64>(&shape).scale(std);
    }
}
