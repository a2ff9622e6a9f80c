//! Layers shared by the backbone and the context encoder.

use dualpaint_autograd::{Scalar, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{Binder, Group, ParamId, ParamStore};

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Gaussian weights with std `1/sqrt(fan_in)`, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: store.normal(format!("{name}.w"), group, &[fan_in, fan_out], std, rng),
            b: store.zeros(format!("{name}.b"), group, &[fan_out]),
        }
    }

    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: Group, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: store.zeros(format!("{name}.w"), group, &[fan_in, fan_out]),
            b: store.zeros(format!("{name}.b"), group, &[fan_out]),
        }
    }

    pub fn duplicate<T: Scalar>(&self, store: &mut ParamStore<T>, name: &str, group: Group) -> Self {
        Self {
            w: store.duplicate(self.w, format!("{name}.w"), group),
            b: store.duplicate(self.b, format!("{name}.b"), group),
        }
    }

    /// Overwrites this layer's values with those of `src`.
    pub fn copy_values_from<T: Scalar>(&self, store: &mut ParamStore<T>, src: &Self) {
        *store.value_mut(self.w) = store.value(src.w).clone();
        *store.value_mut(self.b) = store.value(src.b).clone();
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Binder<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.matmul(b.p(self.w))?.add_row(b.p(self.b))?)
    }

    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.w).len() + store.value(self.b).len()
    }
}

/// Low-rank update `x·A·B·(alpha/rank)` added to a frozen projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowRank {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

impl LowRank {
    /// `A` Gaussian, `B` zero, so the update starts at exactly zero.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim_in: usize,
        dim_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            a: store.normal(format!("{name}.a"), Group::Adapter, &[dim_in, rank], 1.0 / (dim_in as f64).sqrt(), rng),
            b: store.zeros(format!("{name}.b"), Group::Adapter, &[rank, dim_out]),
            scale: alpha / rank as f64,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Binder<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.matmul(b.p(self.a))?.matmul(b.p(self.b))?.scale(self.scale)?)
    }
}

/// Projection with an optional low-rank adapter.
pub(crate) fn project<'t, T: Scalar>(
    b: &Binder<'t, T>,
    lin: &Linear,
    lora: Option<&LowRank>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let y = lin.forward(b, x)?;
    match lora {
        Some(l) => Ok(y.add(l.forward(b, x)?)?),
        None => Ok(y),
    }
}

/// Low-rank adapters for one block's Q, K and V projections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QkvAdapter {
    pub q: LowRank,
    pub k: LowRank,
    pub v: LowRank,
}

/// Per-layer extra key/value source for a block's attention.
#[derive(Clone)]
pub enum KvExtra<'t, T: Scalar> {
    None,
    /// Explicit `(K_id, V_id)` rows appended to the layer's keys and values.
    Given(Var<'t, T>, Var<'t, T>),
    /// Keys/values of the given rows of this layer's own input.
    CurrentRows(Vec<usize>),
}

/// Transformer block with adaptive layer-norm (shift/scale/gate) conditioning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    /// `d → 6d`: shift1, scale1, gate1, shift2, scale2, gate2.
    pub modulation: Linear,
    pub d_model: usize,
    pub heads: usize,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        d_model: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = d_model;
        Self {
            q: Linear::new(store, &format!("{name}.q"), group, d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), group, d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), group, d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), group, d, d, rng),
            mlp_in: Linear::new(store, &format!("{name}.mlp_in"), group, d, mlp_ratio * d, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp_out"), group, mlp_ratio * d, d, rng),
            // adaLN-Zero: every block starts as the identity map.
            modulation: Linear::zeros(store, &format!("{name}.modulation"), group, d, 6 * d),
            d_model,
            heads,
        }
    }

    /// Copies every parameter of this block into `group` under `name`.
    pub fn duplicate<T: Scalar>(&self, store: &mut ParamStore<T>, name: &str, group: Group) -> Self {
        Self {
            q: self.q.duplicate(store, &format!("{name}.q"), group),
            k: self.k.duplicate(store, &format!("{name}.k"), group),
            v: self.v.duplicate(store, &format!("{name}.v"), group),
            o: self.o.duplicate(store, &format!("{name}.o"), group),
            mlp_in: self.mlp_in.duplicate(store, &format!("{name}.mlp_in"), group),
            mlp_out: self.mlp_out.duplicate(store, &format!("{name}.mlp_out"), group),
            modulation: self.modulation.duplicate(store, &format!("{name}.modulation"), group),
            d_model: self.d_model,
            heads: self.heads,
        }
    }

    pub fn copy_values_from<T: Scalar>(&self, store: &mut ParamStore<T>, src: &Self) {
        for (dst, s) in self.linears().into_iter().zip(src.linears()) {
            dst.copy_values_from(store, s);
        }
    }

    fn linears(&self) -> [&Linear; 7] {
        [&self.q, &self.k, &self.v, &self.o, &self.mlp_in, &self.mlp_out, &self.modulation]
    }

    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        [self.q, self.k, self.v, self.o, self.mlp_in, self.mlp_out, self.modulation]
            .iter()
            .map(|l| l.param_count(store))
            .sum()
    }

    /// Adaptive-norm input to the attention projections.
    pub(crate) fn attn_input<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        x: Var<'t, T>,
        m: &Modulation<'t, T>,
    ) -> Result<Var<'t, T>> {
        modulate(b, x, m.shift1, m.scale1)
    }

    pub(crate) fn modulation<'t, T: Scalar>(&self, b: &Binder<'t, T>, cond: Var<'t, T>) -> Result<Modulation<'t, T>> {
        let d = self.d_model;
        let m = self.modulation.forward(b, cond.silu()?)?;
        let part = |i: usize| m.slice_cols(i * d, d);
        Ok(Modulation {
            shift1: part(0)?,
            scale1: part(1)?,
            gate1: part(2)?,
            shift2: part(3)?,
            scale2: part(4)?,
            gate2: part(5)?,
        })
    }

    /// One block. `cond` is the `[1,d]` conditioning vector.
    pub(crate) fn forward<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        x: Var<'t, T>,
        cond: Var<'t, T>,
        adapter: Option<&QkvAdapter>,
        extra: &KvExtra<'t, T>,
    ) -> Result<Var<'t, T>> {
        let m = self.modulation(b, cond)?;
        let h = self.attn_input(b, x, &m)?;
        let q = project(b, &self.q, adapter.map(|a| &a.q), h)?;
        let mut k = project(b, &self.k, adapter.map(|a| &a.k), h)?;
        let mut v = project(b, &self.v, adapter.map(|a| &a.v), h)?;
        match extra {
            KvExtra::None => {}
            KvExtra::Given(kid, vid) => {
                let (kid, vid) = (*kid, *vid);
                if kid.shape()[0] > 0 {
                    k = Var::concat_rows(&[k, kid])?;
                    v = Var::concat_rows(&[v, vid])?;
                }
            }
            KvExtra::CurrentRows(rows) => {
                if !rows.is_empty() {
                    let (kid, vid) = self.region_kv(b, h, rows, adapter)?;
                    k = Var::concat_rows(&[k, kid])?;
                    v = Var::concat_rows(&[v, vid])?;
                }
            }
        }
        let a = q.multi_head_attention(k, v, self.heads)?;
        let a = self.o.forward(b, a)?;
        let x = x.add(a.mul_row(m.gate1)?)?;
        let h2 = modulate(b, x, m.shift2, m.scale2)?;
        let f = self.mlp_out.forward(b, self.mlp_in.forward(b, h2)?.gelu()?)?;
        Ok(x.add(f.mul_row(m.gate2)?)?)
    }

    /// Keys and values of selected rows of the block's attention input.
    pub(crate) fn region_kv<'t, T: Scalar>(
        &self,
        b: &Binder<'t, T>,
        h: Var<'t, T>,
        rows: &[usize],
        adapter: Option<&QkvAdapter>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let g = h.gather_rows(rows)?;
        Ok((
            project(b, &self.k, adapter.map(|a| &a.k), g)?,
            project(b, &self.v, adapter.map(|a| &a.v), g)?,
        ))
    }
}

pub(crate) struct Modulation<'t, T: Scalar> {
    pub shift1: Var<'t, T>,
    pub scale1: Var<'t, T>,
    pub gate1: Var<'t, T>,
    pub shift2: Var<'t, T>,
    pub scale2: Var<'t, T>,
    pub gate2: Var<'t, T>,
}

/// `LN(x)·(1+scale)+shift` with a non-affine layer norm.
pub(crate) fn modulate<'t, T: Scalar>(
    b: &Binder<'t, T>,
    x: Var<'t, T>,
    shift: Var<'t, T>,
    scale: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let d = *x.shape().last().expect("rank >= 1");
    let tape = b.tape();
    let ones = tape.constant_owned(Tensor::ones(&[d]));
    let zeros = tape.constant_owned(Tensor::zeros(&[d]));
    let n = x.layer_norm(ones, zeros, LN_EPS)?;
    Ok(n.mul_row(scale.add_scalar(1.0)?)?.add_row(shift)?)
}

/// Sinusoidal embedding of a scalar position: `[sin(p·f_k) | cos(p·f_k)]`
/// with `f_k = 10000^(-k/half)`.
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let f = 10000f64.powf(-(k as f64) / half as f64);
        out[k] = (pos * f).sin();
        out[half + k] = (pos * f).cos();
    }
    out
}
