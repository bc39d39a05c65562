use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{shape_err, Result, StivError};

use super::kernels;
use super::{Real, Tensor};

#[derive(Clone)]
struct Parent<E> {
    id: Option<usize>,
    value: Rc<Tensor<E>>,
}

enum Op<E> {
    Leaf,
    Add(Parent<E>, Parent<E>),
    Sub(Parent<E>, Parent<E>),
    Mul(Parent<E>, Parent<E>),
    Scale(Parent<E>, E),
    MatMul { a: Parent<E>, b: Parent<E>, tb: bool },
    Softmax(Parent<E>),
    RmsNorm { x: Parent<E>, gain: Parent<E>, inv: Vec<E> },
    LayerNorm { x: Parent<E>, inv: Vec<E> },
    Rope { x: Parent<E>, cos: Rc<Tensor<E>>, sin: Rc<Tensor<E>> },
    Gelu(Parent<E>),
    Silu(Parent<E>),
    Reshape(Parent<E>),
    Permute(Parent<E>, Vec<usize>),
    IndexSelect { x: Parent<E>, axis: usize, indices: Rc<Vec<Vec<usize>>> },
    Scatter { x: Parent<E>, axis: usize, indices: Rc<Vec<Vec<usize>>> },
    Concat(Vec<Parent<E>>),
    Sum(Parent<E>),
}

struct Node<E> {
    op: Op<E>,
    value: Rc<Tensor<E>>,
}

/// Records differentiable operations for one forward pass.
///
/// Values that do not depend on any tracked leaf are never recorded, and with
/// gradients disabled nothing is recorded at all.
pub struct Tape<E> {
    nodes: RefCell<Vec<Node<E>>>,
    grad_enabled: Cell<bool>,
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value produced on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t, E: Real> {
    tape: &'t Tape<E>,
    id: Option<usize>,
    value: Rc<Tensor<E>>,
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: Cell::new(true),
        }
    }

    /// A tape that never records; for sampling and evaluation.
    pub fn inference() -> Self {
        let tape = Self::new();
        tape.grad_enabled.set(false);
        tape
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<E>) -> Var<'_, E> {
        let value = Rc::new(value);
        let id = self.grad_enabled.get().then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op: Op::Leaf,
                value: value.clone(),
            });
            nodes.len() - 1
        });
        Var {
            tape: self,
            id,
            value,
        }
    }

    /// Untracked input.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        Var {
            tape: self,
            id: None,
            value: Rc::new(value),
        }
    }

    fn push(&self, op: &'static str, value: Tensor<E>, tracked: bool, record: impl FnOnce() -> Op<E>) -> Result<Var<'_, E>> {
        value.check_finite(op)?;
        let value = Rc::new(value);
        let id = (tracked && self.grad_enabled.get()).then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op: record(),
                value: value.clone(),
            });
            nodes.len() - 1
        });
        Ok(Var {
            tape: self,
            id,
            value,
        })
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`. Values that
    /// `output` does not depend on receive zeros.
    pub fn grad(&self, output: &Var<'_, E>, wrt: &[&Var<'_, E>]) -> Result<Vec<Tensor<E>>> {
        if output.value.numel() != 1 {
            return Err(StivError::NonScalar(output.value.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<E>>> = (0..nodes.len()).map(|_| None).collect();
        if let Some(root) = output.id {
            grads[root] = Some(Tensor::ones(output.value.shape()));
            for i in (0..=root).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &nodes[i];
                if matches!(node.op, Op::Leaf) {
                    grads[i] = Some(g);
                    continue;
                }
                backward(&node.op, &node.value, &g, &mut |pid, pg| {
                    match &mut grads[pid] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a += *b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|v| {
                v.id
                    .and_then(|id| grads[id].clone())
                    .unwrap_or_else(|| Tensor::zeros(v.value.shape()))
            })
            .collect())
    }
}

fn backward<E: Real>(op: &Op<E>, out: &Tensor<E>, g: &Tensor<E>, acc: &mut dyn FnMut(usize, Tensor<E>)) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(id) = a.id {
                acc(id, kernels::sum_to_shape(g, a.value.shape()));
            }
            if let Some(id) = b.id {
                acc(id, kernels::sum_to_shape(g, b.value.shape()));
            }
        }
        Op::Sub(a, b) => {
            if let Some(id) = a.id {
                acc(id, kernels::sum_to_shape(g, a.value.shape()));
            }
            if let Some(id) = b.id {
                acc(id, kernels::sum_to_shape(&g.map(|v| -v), b.value.shape()));
            }
        }
        Op::Mul(a, b) => {
            if let Some(id) = a.id {
                let ga = kernels::binary_broadcast("mul", g, &b.value, |x, y| x * y).expect("broadcast checked");
                acc(id, kernels::sum_to_shape(&ga, a.value.shape()));
            }
            if let Some(id) = b.id {
                let gb = kernels::binary_broadcast("mul", g, &a.value, |x, y| x * y).expect("broadcast checked");
                acc(id, kernels::sum_to_shape(&gb, b.value.shape()));
            }
        }
        Op::Scale(a, c) => {
            if let Some(id) = a.id {
                acc(id, g.scale(*c));
            }
        }
        Op::MatMul { a, b, tb } => {
            let tb = *tb;
            if let Some(id) = a.id {
                // d op(a) = g · op(b)^T
                let ga = kernels::matmul(g, &b.value, false, !tb).expect("shapes checked");
                acc(id, ga);
            }
            if let Some(id) = b.id {
                let gb = if b.value.ndim() == 2 {
                    let gb = kernels::matmul(&a.value, &flat2(g), true, false).expect("shapes checked");
                    if tb {
                        gb.permute(&[1, 0]).expect("2-d")
                    } else {
                        gb
                    }
                } else if tb {
                    kernels::matmul(g, &a.value, true, false).expect("shapes checked")
                } else {
                    kernels::matmul(&a.value, g, true, false).expect("shapes checked")
                };
                acc(id, gb);
            }
        }
        Op::Softmax(x) => {
            if let Some(id) = x.id {
                acc(id, kernels::softmax_backward(out, g));
            }
        }
        Op::RmsNorm { x, gain, inv } => {
            let (gx, gg) = kernels::rms_norm_backward(&x.value, &gain.value, inv, g);
            if let Some(id) = x.id {
                acc(id, gx);
            }
            if let Some(id) = gain.id {
                acc(id, gg);
            }
        }
        Op::LayerNorm { x, inv } => {
            if let Some(id) = x.id {
                acc(id, kernels::layer_norm_backward(out, inv, g));
            }
        }
        Op::Rope { x, cos, sin } => {
            if let Some(id) = x.id {
                acc(id, kernels::rope(g, cos, sin, true));
            }
        }
        Op::Gelu(x) => {
            if let Some(id) = x.id {
                let gx = x.value.zip_map(g, |v, g| g * kernels::gelu_grad(v)).expect("same shape");
                acc(id, gx);
            }
        }
        Op::Silu(x) => {
            if let Some(id) = x.id {
                let gx = x.value.zip_map(g, |v, g| g * kernels::silu_grad(v)).expect("same shape");
                acc(id, gx);
            }
        }
        Op::Reshape(x) => {
            if let Some(id) = x.id {
                acc(id, g.clone().reshape(x.value.shape()).expect("same numel"));
            }
        }
        Op::Permute(x, perm) => {
            if let Some(id) = x.id {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(id, g.permute(&inv).expect("valid perm"));
            }
        }
        Op::IndexSelect { x, axis, indices } => {
            if let Some(id) = x.id {
                acc(id, kernels::scatter_add(g, *axis, indices, x.value.shape()[*axis]));
            }
        }
        Op::Scatter { x, axis, indices } => {
            if let Some(id) = x.id {
                acc(id, kernels::index_select(g, *axis, indices));
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = p.value.numel();
                if let Some(id) = p.id {
                    let data = g.data()[offset..offset + n].to_vec();
                    acc(id, Tensor::from_parts(p.value.shape().to_vec(), data));
                }
                offset += n;
            }
        }
        Op::Sum(x) => {
            if let Some(id) = x.id {
                acc(id, Tensor::full(x.value.shape(), g.item()));
            }
        }
    }
}

fn flat2<E: Real>(t: &Tensor<E>) -> Tensor<E> {
    let last = *t.shape().last().unwrap_or(&1);
    t.clone().reshape(&[t.numel() / last.max(1), last]).expect("same numel")
}

impl<'t, E: Real> Var<'t, E> {
    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    /// Whether gradients flow through this value.
    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    fn parent(&self) -> Parent<E> {
        Parent {
            id: self.id,
            value: self.value.clone(),
        }
    }

    /// Element-wise sum with broadcasting.
    pub fn add(&self, other: &Var<'t, E>) -> Result<Var<'t, E>> {
        let v = kernels::binary_broadcast("add", &self.value, &other.value, |a, b| a + b)?;
        self.tape.push("add", v, self.is_tracked() || other.is_tracked(), || {
            Op::Add(self.parent(), other.parent())
        })
    }

    pub fn sub(&self, other: &Var<'t, E>) -> Result<Var<'t, E>> {
        let v = kernels::binary_broadcast("sub", &self.value, &other.value, |a, b| a - b)?;
        self.tape.push("sub", v, self.is_tracked() || other.is_tracked(), || {
            Op::Sub(self.parent(), other.parent())
        })
    }

    pub fn mul(&self, other: &Var<'t, E>) -> Result<Var<'t, E>> {
        let v = kernels::binary_broadcast("mul", &self.value, &other.value, |a, b| a * b)?;
        self.tape.push("mul", v, self.is_tracked() || other.is_tracked(), || {
            Op::Mul(self.parent(), other.parent())
        })
    }

    pub fn scale(&self, c: E) -> Result<Var<'t, E>> {
        let v = self.value.scale(c);
        self.tape.push("scale", v, self.is_tracked(), || Op::Scale(self.parent(), c))
    }

    /// `self · w`. A 2-D `w` acts on the last axis; otherwise a batched product.
    pub fn matmul(&self, w: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.matmul_impl(w, false)
    }

    /// `self · wᵀ`, transposing the last two axes of `w`.
    pub fn matmul_t(&self, w: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.matmul_impl(w, true)
    }

    fn matmul_impl(&self, w: &Var<'t, E>, tb: bool) -> Result<Var<'t, E>> {
        let v = kernels::matmul(&self.value, &w.value, false, tb)?;
        self.tape.push("matmul", v, self.is_tracked() || w.is_tracked(), || Op::MatMul {
            a: self.parent(),
            b: w.parent(),
            tb,
        })
    }

    /// Softmax over the last axis; `causal` hides keys after each query position.
    pub fn softmax(&self, causal: bool) -> Result<Var<'t, E>> {
        if self.value.ndim() == 0 {
            return shape_err("softmax", "scalar input");
        }
        if causal && (self.value.ndim() < 2 || self.shape()[self.value.ndim() - 2] != *self.shape().last().unwrap()) {
            return shape_err("softmax", format!("causal mask needs square trailing axes, got {:?}", self.shape()));
        }
        let v = kernels::softmax(&self.value, causal);
        self.tape.push("softmax", v, self.is_tracked(), || Op::Softmax(self.parent()))
    }

    pub fn rms_norm(&self, gain: &Var<'t, E>, eps: f64) -> Result<Var<'t, E>> {
        if gain.value.ndim() != 1 || self.shape().last() != Some(&gain.value.numel()) {
            return shape_err("rms_norm", format!("{:?} with gain {:?}", self.shape(), gain.shape()));
        }
        let (v, inv) = kernels::rms_norm(&self.value, &gain.value, E::from_f64(eps));
        self.tape.push("rms_norm", v, self.is_tracked() || gain.is_tracked(), || Op::RmsNorm {
            x: self.parent(),
            gain: gain.parent(),
            inv,
        })
    }

    /// Stateless layer normalization over the last axis.
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t, E>> {
        if self.value.ndim() == 0 {
            return shape_err("layer_norm", "scalar input");
        }
        let (v, inv) = kernels::layer_norm(&self.value, E::from_f64(eps));
        self.tape.push("layer_norm", v, self.is_tracked(), || Op::LayerNorm {
            x: self.parent(),
            inv,
        })
    }

    /// Pairwise rotation of the last axis by precomputed `[tables, L, d]` angle tables.
    pub fn rope(&self, cos: Rc<Tensor<E>>, sin: Rc<Tensor<E>>) -> Result<Var<'t, E>> {
        let nd = self.value.ndim();
        let cn = cos.ndim();
        if nd < 2 || cn < 2 || cos.shape() != sin.shape() || cos.shape()[cn - 2..] != self.shape()[nd - 2..] {
            return shape_err("rope", format!("{:?} with table {:?}", self.shape(), cos.shape()));
        }
        let table_len = cos.shape()[cn - 2] * cos.shape()[cn - 1];
        let blocks = self.value.numel() / table_len.max(1);
        let tables = cos.numel() / table_len.max(1);
        if tables == 0 || blocks % tables != 0 || cos.shape()[cn - 1] % 2 != 0 {
            return shape_err("rope", format!("{:?} with table {:?}", self.shape(), cos.shape()));
        }
        let v = kernels::rope(&self.value, &cos, &sin, false);
        self.tape.push("rope", v, self.is_tracked(), || Op::Rope {
            x: self.parent(),
            cos,
            sin,
        })
    }

    pub fn gelu(&self) -> Result<Var<'t, E>> {
        let v = self.value.map(kernels::gelu);
        self.tape.push("gelu", v, self.is_tracked(), || Op::Gelu(self.parent()))
    }

    pub fn silu(&self) -> Result<Var<'t, E>> {
        let v = self.value.map(kernels::silu);
        self.tape.push("silu", v, self.is_tracked(), || Op::Silu(self.parent()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, E>> {
        let v = (*self.value).clone().reshape(shape)?;
        self.tape.push("reshape", v, self.is_tracked(), || Op::Reshape(self.parent()))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, E>> {
        let v = self.value.permute(perm)?;
        self.tape.push("permute", v, self.is_tracked(), || {
            Op::Permute(self.parent(), perm.to_vec())
        })
    }

    /// Gathers positions along `axis`; one shared index list or one per leading entry.
    pub fn index_select(&self, axis: usize, indices: Rc<Vec<Vec<usize>>>) -> Result<Var<'t, E>> {
        check_indices("index_select", self.shape(), axis, &indices, self.shape().get(axis).copied())?;
        let v = kernels::index_select(&self.value, axis, &indices);
        self.tape.push("index_select", v, self.is_tracked(), || Op::IndexSelect {
            x: self.parent(),
            axis,
            indices,
        })
    }

    /// Places slices along `axis` at `indices` inside a zero tensor of extent `full_len`.
    pub fn scatter(&self, axis: usize, indices: Rc<Vec<Vec<usize>>>, full_len: usize) -> Result<Var<'t, E>> {
        check_indices("scatter", self.shape(), axis, &indices, Some(full_len))?;
        for list in indices.iter() {
            if list.len() != self.shape()[axis] {
                return shape_err("scatter", format!("{} indices for extent {}", list.len(), self.shape()[axis]));
            }
            let mut seen = vec![false; full_len];
            if list.iter().any(|&i| std::mem::replace(&mut seen[i], true)) {
                return shape_err("scatter", "overlapping indices");
            }
        }
        let v = kernels::scatter_add(&self.value, axis, &indices, full_len);
        self.tape.push("scatter", v, self.is_tracked(), || Op::Scatter {
            x: self.parent(),
            axis,
            indices,
        })
    }

    /// Concatenation along the leading axis.
    pub fn concat(parts: &[Var<'t, E>]) -> Result<Var<'t, E>> {
        let Some(first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let tail = &first.shape()[1..];
        let mut data = Vec::new();
        let mut lead = 0;
        for p in parts {
            if p.value.ndim() == 0 || &p.shape()[1..] != tail {
                return shape_err("concat", format!("{:?} vs {:?}", p.shape(), first.shape()));
            }
            lead += p.shape()[0];
            data.extend_from_slice(p.value.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let tracked = parts.iter().any(|p| p.is_tracked());
        first.tape.push("concat", Tensor::from_parts(shape, data), tracked, || {
            Op::Concat(parts.iter().map(|p| p.parent()).collect())
        })
    }

    pub fn sum(&self) -> Result<Var<'t, E>> {
        let v = Tensor::scalar(self.value.sum());
        self.tape.push("sum", v, self.is_tracked(), || Op::Sum(self.parent()))
    }

    pub fn mean(&self) -> Result<Var<'t, E>> {
        let n = self.value.numel().max(1);
        self.sum()?.scale(E::from_f64(1.0 / n as f64))
    }
}

fn check_indices(op: &'static str, shape: &[usize], axis: usize, indices: &[Vec<usize>], bound: Option<usize>) -> Result<()> {
    if axis >= shape.len() || indices.is_empty() {
        return shape_err(op, format!("axis {axis} of {shape:?}"));
    }
    if indices.len() > 1 && (axis == 0 || indices.len() != shape[0]) {
        return shape_err(op, format!("{} index lists for {shape:?}", indices.len()));
    }
    let k = indices[0].len();
    let bound = bound.unwrap_or(usize::MAX);
    if indices.iter().any(|l| l.len() != k || l.iter().any(|&i| i >= bound)) {
        return shape_err(op, "ragged or out-of-range indices");
    }
    Ok(())
}
