//! Forward and backward kernels over plain [`Tensor`]s.

use crate::error::{shape_err, Result};

use super::{contiguous_strides, Real, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    (0..nd)
        .map(|i| {
            let da = aligned_dim(a, nd, i);
            let db = aligned_dim(b, nd, i);
            match (da, db) {
                (x, y) if x == y => Some(x),
                (1, y) => Some(y),
                (x, 1) => Some(x),
                _ => None,
            }
        })
        .collect()
}

fn aligned_dim(shape: &[usize], nd: usize, i: usize) -> usize {
    let offset = nd - shape.len();
    if i < offset {
        1
    } else {
        shape[i - offset]
    }
}

/// Strides of `shape` laid against `out_shape`, zero along broadcast axes.
fn aligned_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let own = contiguous_strides(shape);
    let offset = nd - shape.len();
    (0..nd)
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every row of `out_shape` (all axes but the last), yielding the flat offsets
/// of the row start in the output and in each strided source.
fn for_each_row(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out_shape.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let last = nd - 1;
    let inner = out_shape[last];
    let rows: usize = out_shape[..last].iter().product();
    let mut idx = vec![0usize; last];
    let (mut oa, mut ob) = (0usize, 0usize);
    for r in 0..rows {
        f(r * inner, oa, ob);
        for d in (0..last).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary_broadcast<E: Real>(
    op: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let Some(out_shape) = broadcast_shape(a.shape(), b.shape()) else {
        return shape_err(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    };
    let sa = aligned_strides(a.shape(), &out_shape);
    let sb = aligned_strides(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let mut out = vec![E::ZERO; n];
    let inner = out_shape.last().copied().unwrap_or(1);
    let (la, lb) = (
        sa.last().copied().unwrap_or(0),
        sb.last().copied().unwrap_or(0),
    );
    let (ad, bd) = (a.data(), b.data());
    for_each_row(&out_shape, &sa, &sb, |o, oa, ob| {
        let row = &mut out[o..o + inner];
        match (la, lb) {
            (1, 1) => {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = f(ad[oa + j], bd[ob + j]);
                }
            }
            (1, 0) => {
                let y = bd[ob];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = f(ad[oa + j], y);
                }
            }
            (0, 1) => {
                let x = ad[oa];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = f(x, bd[ob + j]);
                }
            }
            _ => {
                let v = f(ad[oa], bd[ob]);
                row.iter_mut().for_each(|r| *r = v);
            }
        }
    });
    Ok(Tensor::from_parts(out_shape, out))
}

/// Sums `g` down to `target` by reducing over broadcast axes.
pub(crate) fn sum_to_shape<E: Real>(g: &Tensor<E>, target: &[usize]) -> Tensor<E> {
    if g.shape() == target {
        return g.clone();
    }
    let out_shape = g.shape();
    let st = aligned_strides(target, out_shape);
    let zeros = vec![0; out_shape.len()];
    let mut acc = vec![E::ZERO; target.iter().product()];
    let inner = out_shape.last().copied().unwrap_or(1);
    let lt = st.last().copied().unwrap_or(0);
    let gd = g.data();
    for_each_row(out_shape, &st, &zeros, |o, ot, _| {
        let row = &gd[o..o + inner];
        if lt == 1 {
            for (j, &v) in row.iter().enumerate() {
                acc[ot + j] += v;
            }
        } else {
            let s = row.iter().fold(E::ZERO, |a, &v| a + v);
            acc[ot] += s;
        }
    });
    Tensor::from_parts(target.to_vec(), acc)
}

/// `op(a) · op(b)` where `a` is stored `[ar, ac]` and `b` stored `[br, bc]`.
#[allow(clippy::too_many_arguments)]
fn mm<E: Real>(
    a: &[E],
    ar: usize,
    ac: usize,
    ta: bool,
    b: &[E],
    br: usize,
    bc: usize,
    tb: bool,
    out: &mut [E],
) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    debug_assert_eq!(if tb { bc } else { br }, k);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v = E::ZERO);
        return;
    }
    // SAFETY: slice lengths match the stated extents and strides.
    unsafe {
        E::gemm(
            m,
            k,
            n,
            E::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            E::ZERO,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product with optional transposition of either operand.
///
/// A 2-D `b` is shared across every leading axis of `a` (the `a` rows are flattened),
/// otherwise both operands carry identical leading batch axes.
pub(crate) fn matmul<E: Real>(a: &Tensor<E>, b: &Tensor<E>, ta: bool, tb: bool) -> Result<Tensor<E>> {
    if b.ndim() == 2 {
        let (br, bc) = (b.shape()[0], b.shape()[1]);
        let (k, n) = if tb { (bc, br) } else { (br, bc) };
        if a.ndim() == 0 {
            return shape_err("matmul", "scalar operand");
        }
        if ta {
            // [M, k]^T · [M, n] reduction over flattened rows; used by weight gradients.
            let ak = *a.shape().last().unwrap();
            let rows = a.numel() / ak.max(1);
            if tb || rows != b.numel() / bc.max(1) {
                return shape_err("matmul", format!("{:?}^T x {:?}", a.shape(), b.shape()));
            }
            let mut out = vec![E::ZERO; ak * bc];
            mm(a.data(), rows, ak, true, b.data(), rows, bc, false, &mut out);
            return Ok(Tensor::from_parts(vec![ak, bc], out));
        }
        let ak = *a.shape().last().unwrap();
        if ak != k {
            return shape_err("matmul", format!("{:?} x {:?} (tb={tb})", a.shape(), b.shape()));
        }
        let rows = a.numel() / k.max(1);
        let mut out = vec![E::ZERO; rows * n];
        mm(a.data(), rows, k, false, b.data(), br, bc, tb, &mut out);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        return Ok(Tensor::from_parts(shape, out));
    }
    let nd = a.ndim();
    if nd < 3 || b.ndim() != nd || a.shape()[..nd - 2] != b.shape()[..nd - 2] {
        return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
    }
    let (ar, ac) = (a.shape()[nd - 2], a.shape()[nd - 1]);
    let (br, bc) = (b.shape()[nd - 2], b.shape()[nd - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        return shape_err(
            "matmul",
            format!("{:?} x {:?} (ta={ta}, tb={tb})", a.shape(), b.shape()),
        );
    }
    let batch: usize = a.shape()[..nd - 2].iter().product();
    let mut out = vec![E::ZERO; batch * m * n];
    for i in 0..batch {
        mm(
            &a.data()[i * ar * ac..(i + 1) * ar * ac],
            ar,
            ac,
            ta,
            &b.data()[i * br * bc..(i + 1) * br * bc],
            br,
            bc,
            tb,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let mut shape = a.shape()[..nd - 2].to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

/// Softmax over the last axis. With `causal`, entry `j` of query row `i` is excluded
/// whenever `j > i` (row index taken modulo the second-to-last extent).
pub(crate) fn softmax<E: Real>(x: &Tensor<E>, causal: bool) -> Tensor<E> {
    let n = *x.shape().last().unwrap_or(&1);
    let q = if x.ndim() >= 2 { x.shape()[x.ndim() - 2] } else { 1 };
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(n).enumerate() {
        let valid = if causal { (r % q + 1).min(n) } else { n };
        let m = row[..valid].iter().copied().fold(row[0], E::max);
        let mut s = E::ZERO;
        for v in row[..valid].iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = E::ONE / s;
        row[..valid].iter_mut().for_each(|v| *v *= inv);
        row[valid..].iter_mut().for_each(|v| *v = E::ZERO);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<E: Real>(y: &Tensor<E>, g: &Tensor<E>) -> Tensor<E> {
    let n = *y.shape().last().unwrap_or(&1);
    let mut out = vec![E::ZERO; y.numel()];
    for ((yr, gr), or) in y.data().chunks(n).zip(g.data().chunks(n)).zip(out.chunks_mut(n)) {
        let dot = yr.iter().zip(gr).fold(E::ZERO, |a, (&y, &g)| a + y * g);
        for ((o, &y), &g) in or.iter_mut().zip(yr).zip(gr) {
            *o = y * (g - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// `gain ⊙ x / sqrt(mean(x²) + eps)` over the last axis; also returns the per-row
/// inverse RMS.
pub(crate) fn rms_norm<E: Real>(x: &Tensor<E>, gain: &Tensor<E>, eps: E) -> (Tensor<E>, Vec<E>) {
    let d = gain.numel();
    let dn = E::from_f64(d as f64);
    let mut out = vec![E::ZERO; x.numel()];
    let mut inv = Vec::with_capacity(x.numel() / d.max(1));
    for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let ms = xr.iter().fold(E::ZERO, |a, &v| a + v * v) / dn;
        let r = E::ONE / (ms + eps).sqrt();
        inv.push(r);
        for ((o, &v), &w) in or.iter_mut().zip(xr).zip(gain.data()) {
            *o = w * v * r;
        }
    }
    (Tensor::from_parts(x.shape().to_vec(), out), inv)
}

pub(crate) fn rms_norm_backward<E: Real>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    inv: &[E],
    g: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let d = gain.numel();
    let dn = E::from_f64(d as f64);
    let mut gx = vec![E::ZERO; x.numel()];
    let mut gg = vec![E::ZERO; d];
    for (((xr, gr), gxr), &r) in x
        .data()
        .chunks(d)
        .zip(g.data().chunks(d))
        .zip(gx.chunks_mut(d))
        .zip(inv)
    {
        let mut dot = E::ZERO;
        for j in 0..d {
            let gw = gr[j] * gain.data()[j];
            dot += gw * xr[j];
            gg[j] += gr[j] * xr[j] * r;
        }
        let c = dot * r * r * r / dn;
        for j in 0..d {
            gxr[j] = gr[j] * gain.data()[j] * r - xr[j] * c;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(gain.shape().to_vec(), gg),
    )
}

/// Zero-mean unit-variance normalization over the last axis, no affine terms.
pub(crate) fn layer_norm<E: Real>(x: &Tensor<E>, eps: E) -> (Tensor<E>, Vec<E>) {
    let d = *x.shape().last().unwrap_or(&1);
    let dn = E::from_f64(d as f64);
    let mut out = vec![E::ZERO; x.numel()];
    let mut inv = Vec::with_capacity(x.numel() / d.max(1));
    for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let mean = xr.iter().fold(E::ZERO, |a, &v| a + v) / dn;
        let var = xr.iter().fold(E::ZERO, |a, &v| a + (v - mean) * (v - mean)) / dn;
        let r = E::ONE / (var + eps).sqrt();
        inv.push(r);
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mean) * r;
        }
    }
    (Tensor::from_parts(x.shape().to_vec(), out), inv)
}

pub(crate) fn layer_norm_backward<E: Real>(y: &Tensor<E>, inv: &[E], g: &Tensor<E>) -> Tensor<E> {
    let d = *y.shape().last().unwrap_or(&1);
    let dn = E::from_f64(d as f64);
    let mut gx = vec![E::ZERO; y.numel()];
    for (((yr, gr), gxr), &r) in y
        .data()
        .chunks(d)
        .zip(g.data().chunks(d))
        .zip(gx.chunks_mut(d))
        .zip(inv)
    {
        let mg = gr.iter().fold(E::ZERO, |a, &v| a + v) / dn;
        let mgy = gr.iter().zip(yr).fold(E::ZERO, |a, (&g, &y)| a + g * y) / dn;
        for ((o, &g), &y) in gxr.iter_mut().zip(gr).zip(yr) {
            *o = r * (g - mg - y * mgy);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), gx)
}

/// Rotates interleaved pairs of the last axis. `cos`/`sin` are `[tables, L, d]` with
/// each angle duplicated across its pair; the leading blocks of `x` (viewed as
/// `[blocks, L, d]`) are split evenly and in order across the tables.
pub(crate) fn rope<E: Real>(x: &Tensor<E>, cos: &Tensor<E>, sin: &Tensor<E>, inverse: bool) -> Tensor<E> {
    let table_len = cos.shape()[cos.ndim() - 2] * cos.shape()[cos.ndim() - 1];
    let tables = cos.numel() / table_len;
    let blocks = x.numel() / table_len;
    let per_table = blocks / tables;
    let mut out = vec![E::ZERO; x.numel()];
    for (bi, (xb, ob)) in x
        .data()
        .chunks(table_len)
        .zip(out.chunks_mut(table_len))
        .enumerate()
    {
        let t = bi / per_table;
        let c = &cos.data()[t * table_len..(t + 1) * table_len];
        let s = &sin.data()[t * table_len..(t + 1) * table_len];
        for p in (0..table_len).step_by(2) {
            let (x0, x1) = (xb[p], xb[p + 1]);
            let (cp, sp) = (c[p], if inverse { -s[p] } else { s[p] });
            ob[p] = x0 * cp - x1 * sp;
            ob[p + 1] = x0 * sp + x1 * cp;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

// 0.5·(1 + tanh(u)) is sigmoid(2u); one exp is much cheaper than tanh.
pub(crate) fn gelu<E: Real>(v: E) -> E {
    let u = E::from_f64(GELU_C) * (v + E::from_f64(0.044715) * v * v * v);
    v * sigmoid(u + u)
}

pub(crate) fn gelu_grad<E: Real>(v: E) -> E {
    let c = E::from_f64(GELU_C);
    let k = E::from_f64(0.044715);
    let u = c * (v + k * v * v * v);
    let s = sigmoid(u + u);
    let du = c * (E::ONE + E::from_f64(3.0) * k * v * v);
    s + v * s * (E::ONE - s) * (du + du)
}

pub(crate) fn sigmoid<E: Real>(v: E) -> E {
    E::ONE / (E::ONE + (-v).exp())
}

pub(crate) fn silu<E: Real>(v: E) -> E {
    v * sigmoid(v)
}

pub(crate) fn silu_grad<E: Real>(v: E) -> E {
    let s = sigmoid(v);
    s * (E::ONE + v * (E::ONE - s))
}

/// Splits `shape` around `axis` into (outer, len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gathers `indices` along `axis`. A single index list is shared; otherwise there is
/// one list per entry of the leading axis.
pub(crate) fn index_select<E: Real>(x: &Tensor<E>, axis: usize, indices: &[Vec<usize>]) -> Tensor<E> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let k = indices[0].len();
    let per_list = outer / indices.len();
    let mut out = Vec::with_capacity(outer * k * inner);
    for o in 0..outer {
        let list = &indices[o / per_list];
        let base = o * len * inner;
        for &i in list {
            out.extend_from_slice(&x.data()[base + i * inner..base + (i + 1) * inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = k;
    Tensor::from_parts(shape, out)
}

/// Adjoint of [`index_select`]: accumulates slices of `x` into a zero tensor whose
/// `axis` extent is `full_len`.
pub(crate) fn scatter_add<E: Real>(
    x: &Tensor<E>,
    axis: usize,
    indices: &[Vec<usize>],
    full_len: usize,
) -> Tensor<E> {
    let (outer, k, inner) = axis_split(x.shape(), axis);
    let per_list = outer / indices.len();
    let mut out = vec![E::ZERO; outer * full_len * inner];
    for o in 0..outer {
        let list = &indices[o / per_list];
        let src = o * k * inner;
        let dst = o * full_len * inner;
        for (j, &i) in list.iter().enumerate() {
            let s = &x.data()[src + j * inner..src + (j + 1) * inner];
            for (d, &v) in out[dst + i * inner..dst + (i + 1) * inner].iter_mut().zip(s) {
                *d += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = full_len;
    Tensor::from_parts(shape, out)
}
