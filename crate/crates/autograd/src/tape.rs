use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, LayerNormSaved};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Recorded operation. Input ids always precede the node that uses them.
pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// `[.., d] + [d]`
    AddRow { a: usize, row: usize },
    /// `[.., d] * [d]`
    MulRow { a: usize, row: usize },
    Scale { a: usize, s: f64 },
    AddScalar { a: usize },
    Silu { a: usize },
    Gelu { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    Softmax { a: usize, outer: usize, n: usize, inner: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, saved: LayerNormSaved },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<T> },
    ConcatRows { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    MaskRows { a: usize, keep: Vec<bool> },
    Reshape { a: usize },
    Transpose { a: usize },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Silu { .. } => "silu",
            Op::Gelu { .. } => "gelu",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::MaskRows { .. } => "mask_rows",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::AddRow { a, row } | Op::MulRow { a, row } => vec![*a, *row],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatRows { parts } => parts.clone(),
            Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Silu { a }
            | Op::Gelu { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::Softmax { a, .. }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::MaskRows { a, .. }
            | Op::Reshape { a }
            | Op::Transpose { a } => vec![*a],
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, so every node's inputs precede it and
/// [`Tape::backward`] simply walks the record in reverse. Leaf gradients are
/// kept on the tape; calling `backward` twice without [`Tape::zero_grads`]
/// sums the two passes.
pub struct Tape<T: Scalar = f32> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Vec<T>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
        }
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        let mut v = t.clone();
        v.grad = None;
        let rg = t.requires_grad;
        self.push_unchecked(v, Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        let mut v = t.clone();
        v.grad = None;
        v.requires_grad = false;
        self.push_unchecked(v, Op::Leaf, false)
    }

    pub fn constant_owned(&self, mut t: Tensor<T>) -> Var<'_, T> {
        t.grad = None;
        t.requires_grad = false;
        self.push_unchecked(t, Op::Leaf, false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant_owned(Tensor::scalar(v))
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input node ids of a recorded node.
    pub fn inputs_of(&self, v: Var<'_, T>) -> Vec<usize> {
        self.nodes.borrow()[v.id].op.inputs()
    }

    pub(crate) fn push_unchecked(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let rg = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        // Ops whose result cannot reach a trainable leaf keep no saved state.
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_unchecked(value, op, rg))
    }

    pub(crate) fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into the leaf
    /// gradient buffers.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(());
        }
        grads[loss.id] = Some(vec![T::ONE]);
        let mut leaf = self.leaf_grads.borrow_mut();
        if leaf.len() < nodes.len() {
            leaf.resize(nodes.len(), None);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    match &mut leaf[id] {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &v)| *b += v),
                        slot @ None => *slot = Some(g),
                    }
                }
                continue;
            }
            for (input, gi) in backprop(&nodes, id, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(buf) => buf.iter_mut().zip(&gi).for_each(|(b, &v)| *b += v),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulated on a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Vec<T>> {
        self.leaf_grads.borrow().get(v.id).cloned().flatten()
    }

    /// Adds the gradient of `v` into `t.grad`.
    pub fn write_grad(&self, v: Var<'_, T>, t: &mut Tensor<T>) {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(&g);
        }
    }

    pub fn zero_grads(&self) {
        self.leaf_grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let map = |x: &[T], f: &dyn Fn(usize, f64) -> f64| -> Vec<T> {
        x.iter()
            .enumerate()
            .map(|(i, v)| T::from_f64(f(i, v.to_f64())))
            .collect()
    };
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul { a, b } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            let ga = kernels::matmul_nt(g, val(*b).data(), m, n, k);
            let gb = kernels::matmul_tn(val(*a).data(), g, m, k, n);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub { a, b } => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
        Op::Mul { a, b } => {
            let av = val(*a).data();
            let bv = val(*b).data();
            let ga = g.iter().zip(bv).map(|(&g, &b)| g * b).collect();
            let gb = g.iter().zip(av).map(|(&g, &a)| g * a).collect();
            vec![(*a, ga), (*b, gb)]
        }
        Op::AddRow { a, row } => {
            let d = val(*row).len();
            let mut gr = vec![0f64; d];
            for (i, &gv) in g.iter().enumerate() {
                gr[i % d] += gv.to_f64();
            }
            vec![(*a, g.to_vec()), (*row, gr.into_iter().map(T::from_f64).collect())]
        }
        Op::MulRow { a, row } => {
            let rv = val(*row).data();
            let av = val(*a).data();
            let d = rv.len();
            let mut gr = vec![0f64; d];
            let mut ga = Vec::with_capacity(g.len());
            for (i, &gv) in g.iter().enumerate() {
                gr[i % d] += gv.to_f64() * av[i].to_f64();
                ga.push(gv * rv[i % d]);
            }
            vec![(*a, ga), (*row, gr.into_iter().map(T::from_f64).collect())]
        }
        Op::Scale { a, s } => vec![(*a, map(g, &|_, v| v * s))],
        Op::AddScalar { a } => vec![(*a, g.to_vec())],
        Op::Silu { a } => {
            let x = val(*a).data();
            vec![(
                *a,
                map(g, &|i, gv| {
                    let xv = x[i].to_f64();
                    let s = kernels::sigmoid(xv);
                    gv * (s * (1.0 + xv * (1.0 - s)))
                }),
            )]
        }
        Op::Gelu { a } => {
            let x = val(*a).data();
            vec![(*a, map(g, &|i, gv| gv * kernels::gelu_grad(x[i].to_f64())))]
        }
        Op::Sum { a } => vec![(*a, vec![g[0]; val(*a).len()])],
        Op::Mean { a } => {
            let n = val(*a).len();
            vec![(*a, vec![T::from_f64(g[0].to_f64() / n as f64); n])]
        }
        Op::Softmax { a, outer, n, inner } => {
            let y = node.value.data();
            vec![(*a, kernels::softmax_backward(y, g, *outer, *n, *inner))]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            saved,
        } => {
            let d = val(*gamma).len();
            let (dx, dg, db) = kernels::layer_norm_backward(saved, val(*gamma).data(), g, d);
            vec![(*x, dx), (*gamma, dg), (*beta, db)]
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => {
            let (lq, width) = (val(*q).shape()[0], val(*q).shape()[1]);
            let lk = val(*k).shape()[0];
            let (dq, dk, dv) = kernels::attention_backward(
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                probs,
                g,
                lq,
                lk,
                width,
                *heads,
            );
            vec![(*q, dq), (*k, dk), (*v, dv)]
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            parts
                .iter()
                .map(|&p| {
                    let n = val(p).len();
                    let gi = g[off..off + n].to_vec();
                    off += n;
                    (p, gi)
                })
                .collect()
        }
        Op::SliceRows { a, start } => {
            let src = val(*a);
            let cols = src.shape()[1];
            let mut ga = vec![T::ZERO; src.len()];
            ga[start * cols..start * cols + g.len()].copy_from_slice(g);
            vec![(*a, ga)]
        }
        Op::SliceCols { a, start } => {
            let src = val(*a);
            let (rows, cols) = (src.shape()[0], src.shape()[1]);
            let w = node.value.shape()[1];
            let mut ga = vec![T::ZERO; src.len()];
            for r in 0..rows {
                ga[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![(*a, ga)]
        }
        Op::GatherRows { a, idx } => {
            let src = val(*a);
            let cols = src.shape()[1];
            let mut ga = vec![0f64; src.len()];
            for (o, &r) in idx.iter().enumerate() {
                for c in 0..cols {
                    ga[r * cols + c] += g[o * cols + c].to_f64();
                }
            }
            vec![(*a, ga.into_iter().map(T::from_f64).collect())]
        }
        Op::MaskRows { a, keep } => {
            let cols = node.value.shape()[1];
            let mut ga = g.to_vec();
            for (r, &k) in keep.iter().enumerate() {
                if !k {
                    ga[r * cols..(r + 1) * cols].fill(T::ZERO);
                }
            }
            vec![(*a, ga)]
        }
        Op::Reshape { a } => vec![(*a, g.to_vec())],
        Op::Transpose { a } => {
            let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
            vec![(*a, kernels::transpose(g, r, c))]
        }
    }
}
