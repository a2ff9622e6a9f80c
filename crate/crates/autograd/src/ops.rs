use std::cell::Ref;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

fn shape_err<T>(op: &'static str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let mut t = self.value().clone();
        t.requires_grad = false;
        t
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars recorded on different tapes"
        );
    }

    fn elementwise(
        self,
        other: Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        mk: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Self> {
        self.same_tape(&other);
        let out = {
            let a = self.value();
            let b = other.value();
            if a.shape() != b.shape() {
                return shape_err(op, a.shape(), b.shape());
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(data, a.shape())?
        };
        self.tape.push(out, mk(self.id, other.id))
    }

    fn unary(self, f: impl Fn(T) -> T, op: Op<T>) -> Result<Self> {
        let out = self.value().map(f);
        self.tape.push(out, op)
    }

    /// Matrix product `[m,k] · [k,n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        self.same_tape(&other);
        let out = {
            let a = self.value();
            let b = other.value();
            let (m, k) = match a.shape() {
                [m, k] => (*m, *k),
                s => return shape_err("matmul", s, b.shape()),
            };
            let n = match b.shape() {
                [k2, n] if *k2 == k => *n,
                s => return shape_err("matmul", a.shape(), s),
            };
            Tensor::from_vec(kernels::matmul(a.data(), b.data(), m, k, n), &[m, n])?
        };
        self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.elementwise(other, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        self.elementwise(other, "sub", |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.elementwise(other, "mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    fn row_broadcast(
        self,
        row: Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        mk: Op<T>,
    ) -> Result<Self> {
        self.same_tape(&row);
        let out = {
            let a = self.value();
            let r = row.value();
            let d = r.len();
            if a.rank() == 0 || a.shape()[a.rank() - 1] != d {
                return shape_err(op, a.shape(), r.shape());
            }
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, r.data()[i % d]))
                .collect();
            Tensor::from_vec(data, a.shape())?
        };
        self.tape.push(out, mk)
    }

    /// Adds a `[d]`-element row to every row of a `[.., d]` tensor.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Self> {
        let op = Op::AddRow {
            a: self.id,
            row: row.id,
        };
        self.row_broadcast(row, "add_row", |a, b| a + b, op)
    }

    /// Multiplies every row of a `[.., d]` tensor elementwise by a `[d]` row.
    pub fn mul_row(self, row: Var<'t, T>) -> Result<Self> {
        let op = Op::MulRow {
            a: self.id,
            row: row.id,
        };
        self.row_broadcast(row, "mul_row", |a, b| a * b, op)
    }

    pub fn scale(self, s: f64) -> Result<Self> {
        let sv = T::from_f64(s);
        self.unary(move |x| x * sv, Op::Scale { a: self.id, s })
    }

    pub fn add_scalar(self, c: f64) -> Result<Self> {
        let cv = T::from_f64(c);
        self.unary(move |x| x + cv, Op::AddScalar { a: self.id })
    }

    pub fn silu(self) -> Result<Self> {
        self.unary(
            |x| T::from_f64(x.to_f64() * kernels::sigmoid(x.to_f64())),
            Op::Silu { a: self.id },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Self> {
        self.unary(|x| T::from_f64(kernels::gelu(x.to_f64())), Op::Gelu { a: self.id })
    }

    pub fn sum(self) -> Result<Self> {
        let s: f64 = self.value().data().iter().map(|v| v.to_f64()).sum();
        self.tape.push(Tensor::scalar(T::from_f64(s)), Op::Sum { a: self.id })
    }

    pub fn mean(self) -> Result<Self> {
        let out = {
            let v = self.value();
            if v.is_empty() {
                return Err(Error::Invalid("mean of empty tensor".into()));
            }
            let s: f64 = v.data().iter().map(|v| v.to_f64()).sum();
            Tensor::scalar(T::from_f64(s / v.len() as f64))
        };
        self.tape.push(out, Op::Mean { a: self.id })
    }

    /// Mean squared difference, a scalar.
    pub fn mse(self, target: Var<'t, T>) -> Result<Self> {
        let d = self.sub(target)?;
        d.mul(d)?.mean()
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Self> {
        let (out, outer, n, inner) = {
            let v = self.value();
            let rank = v.rank();
            if axis >= rank {
                return Err(Error::Axis {
                    op: "softmax",
                    axis,
                    rank,
                });
            }
            let outer: usize = v.shape()[..axis].iter().product();
            let n = v.shape()[axis];
            let inner: usize = v.shape()[axis + 1..].iter().product();
            let data = kernels::softmax(v.data(), outer, n, inner);
            (Tensor::from_vec(data, v.shape())?, outer, n, inner)
        };
        self.tape.push(
            out,
            Op::Softmax {
                a: self.id,
                outer,
                n,
                inner,
            },
        )
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Self> {
        if eps <= 0.0 {
            return Err(Error::Invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (out, saved) = {
            let x = self.value();
            let g = gamma.value();
            let b = beta.value();
            let d = *x.shape().last().unwrap_or(&0);
            if d == 0 || g.shape() != [d] || b.shape() != [d] {
                return shape_err("layer_norm", x.shape(), g.shape());
            }
            let (data, saved) = kernels::layer_norm(x.data(), g.data(), b.data(), d, eps);
            (Tensor::from_vec(data, x.shape())?, saved)
        };
        self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                saved,
            },
        )
    }

    /// `softmax(Q·Kᵀ/√d)·V` for a single head.
    pub fn scaled_dot_attention(self, k: Var<'t, T>, v: Var<'t, T>) -> Result<Self> {
        self.multi_head_attention(k, v, 1)
    }

    /// Attention with `heads` column groups of width `d / heads`.
    pub fn multi_head_attention(self, k: Var<'t, T>, v: Var<'t, T>, heads: usize) -> Result<Self> {
        self.same_tape(&k);
        self.same_tape(&v);
        let (out, probs) = {
            let q = self.value();
            let kv = k.value();
            let vv = v.value();
            let (lq, d) = q.dims2("attention")?;
            let (lk, dk) = kv.dims2("attention")?;
            if dk != d {
                return shape_err("attention", q.shape(), kv.shape());
            }
            if vv.shape() != kv.shape() {
                return shape_err("attention", kv.shape(), vv.shape());
            }
            if heads == 0 || d % heads != 0 {
                return Err(Error::Invalid(format!("width {d} not divisible into {heads} heads")));
            }
            if lk == 0 {
                return Err(Error::Invalid("attention over zero keys".into()));
            }
            let (o, p) = kernels::attention(q.data(), kv.data(), vv.data(), lq, lk, d, heads);
            (Tensor::from_vec(o, &[lq, d])?, p)
        };
        self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                heads,
                probs,
            },
        )
    }

    /// Stacks rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows of nothing".into()))?;
        let tape = first.tape;
        let out = {
            let (_, cols) = first.value().dims2("concat_rows")?;
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                first.same_tape(p);
                let v = p.value();
                let (r, c) = v.dims2("concat_rows")?;
                if c != cols {
                    return shape_err("concat_rows", first.value().shape(), v.shape());
                }
                rows += r;
                data.extend_from_slice(v.data());
            }
            Tensor::from_vec(data, &[rows, cols])?
        };
        tape.push(
            out,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        )
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Self> {
        let out = {
            let v = self.value();
            let (r, c) = v.dims2("slice_rows")?;
            if start + len > r {
                return shape_err("slice_rows", v.shape(), &[start, len]);
            }
            Tensor::from_vec(v.data()[start * c..(start + len) * c].to_vec(), &[len, c])?
        };
        self.tape.push(out, Op::SliceRows { a: self.id, start })
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        let out = {
            let v = self.value();
            let (r, c) = v.dims2("slice_cols")?;
            if start + len > c {
                return shape_err("slice_cols", v.shape(), &[start, len]);
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&v.data()[i * c + start..i * c + start + len]);
            }
            Tensor::from_vec(data, &[r, len])?
        };
        self.tape.push(out, Op::SliceCols { a: self.id, start })
    }

    /// Selects rows by index (repeats allowed, empty allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Self> {
        let out = {
            let v = self.value();
            let (r, c) = v.dims2("gather_rows")?;
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= r {
                    return shape_err("gather_rows", v.shape(), &[i]);
                }
                data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
            }
            Tensor::from_vec(data, &[idx.len(), c])?
        };
        self.tape.push(
            out,
            Op::GatherRows {
                a: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    /// Zeroes every row whose `keep` flag is false; other rows pass through.
    pub fn mask_rows(self, keep: &[bool]) -> Result<Self> {
        let out = {
            let v = self.value();
            let (r, c) = v.dims2("mask_rows")?;
            if keep.len() != r {
                return shape_err("mask_rows", v.shape(), &[keep.len()]);
            }
            let mut data = v.data().to_vec();
            for (i, &k) in keep.iter().enumerate() {
                if !k {
                    data[i * c..(i + 1) * c].fill(T::ZERO);
                }
            }
            Tensor::from_vec(data, &[r, c])?
        };
        self.tape.push(
            out,
            Op::MaskRows {
                a: self.id,
                keep: keep.to_vec(),
            },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = self.value().clone().reshape(shape)?;
        self.tape.push(out, Op::Reshape { a: self.id })
    }

    pub fn transpose(self) -> Result<Self> {
        let out = self.value().transpose()?;
        self.tape.push(out, Op::Transpose { a: self.id })
    }
}

/// Straight-line single-head attention on plain tensors, computed in f64
/// without the fused kernel. Used as an independent cross-check.
pub fn reference_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (lq, d) = q.dims2("reference_attention")?;
    let (lk, dk) = k.dims2("reference_attention")?;
    if dk != d || v.shape()[0] != lk {
        return shape_err("reference_attention", q.shape(), k.shape());
    }
    let dv = v.shape()[1];
    let mut out = Vec::with_capacity(lq * dv);
    for i in 0..lq {
        let scores: Vec<f64> = (0..lk)
            .map(|j| {
                (0..d)
                    .map(|c| q.get(&[i, c]).to_f64() * k.get(&[j, c]).to_f64())
                    .sum::<f64>()
                    / (d as f64).sqrt()
            })
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..dv {
            let o: f64 = (0..lk).map(|j| e[j] / z * v.get(&[j, c]).to_f64()).sum();
            out.push(T::from_f64(o));
        }
    }
    Tensor::from_vec(out, &[lq, dv])
}
