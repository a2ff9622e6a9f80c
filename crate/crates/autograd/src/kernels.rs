//! Slice-level numeric kernels. All reductions accumulate in f64 in a fixed
//! sequential order.

use crate::scalar::Scalar;

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.to_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (acc_j, &bv) in acc.iter_mut().zip(brow) {
                *acc_j += av * bv.to_f64();
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = T::from_f64(v);
        }
    }
    out
}

/// `c[k,n] = a[m,k]ᵀ · g[m,n]`
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut acc = vec![0f64; k * n];
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let grow = &g[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let av = av.to_f64();
            if av == 0.0 {
                continue;
            }
            for (acc_j, &gv) in acc[i * n..(i + 1) * n].iter_mut().zip(grow) {
                *acc_j += av * gv.to_f64();
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// `c[m,k] = g[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_nt<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let bt = transpose(b, k, n);
    matmul(g, &bt, m, n, k)
}

pub(crate) fn transpose<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Softmax over the middle axis of an `[outer, n, inner]` view.
pub(crate) fn softmax<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    let mut buf = vec![0f64; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(x[base + j * inner].to_f64());
            }
            let mut s = 0.0;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (x[base + j * inner].to_f64() - mx).exp();
                s += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                out[base + j * inner] = T::from_f64(b / s);
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    g: &[T],
    outer: usize,
    n: usize,
    inner: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = 0.0;
            for j in 0..n {
                let ix = base + j * inner;
                dot += y[ix].to_f64() * g[ix].to_f64();
            }
            for j in 0..n {
                let ix = base + j * inner;
                out[ix] = T::from_f64(y[ix].to_f64() * (g[ix].to_f64() - dot));
            }
        }
    }
    out
}

pub(crate) struct LayerNormSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
    eps: f64,
) -> (Vec<T>, LayerNormSaved) {
    let rows = x.len() / d;
    let mut out = vec![T::ZERO; x.len()];
    let mut xhat = vec![0f64; x.len()];
    let mut inv_std = vec![0f64; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|v| {
                let c = v.to_f64() - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for c in 0..d {
            let h = (row[c].to_f64() - mean) * inv;
            xhat[r * d + c] = h;
            out[r * d + c] = T::from_f64(h * gamma[c].to_f64() + beta[c].to_f64());
        }
    }
    (out, LayerNormSaved { xhat, inv_std })
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn layer_norm_backward<T: Scalar>(
    saved: &LayerNormSaved,
    gamma: &[T],
    g: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = g.len() / d;
    let mut dx = vec![T::ZERO; g.len()];
    let mut dgamma = vec![0f64; d];
    let mut dbeta = vec![0f64; d];
    let mut dxhat = vec![0f64; d];
    for r in 0..rows {
        let xh = &saved.xhat[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            let gv = gr[c].to_f64();
            dgamma[c] += gv * xh[c];
            dbeta[c] += gv;
            dxhat[c] = gv * gamma[c].to_f64();
            m1 += dxhat[c];
            m2 += dxhat[c] * xh[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let inv = saved.inv_std[r];
        for c in 0..d {
            dx[r * d + c] = T::from_f64(inv * (dxhat[c] - m1 - xh[c] * m2));
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::from_f64).collect(),
        dbeta.into_iter().map(T::from_f64).collect(),
    )
}

/// Multi-head scaled dot-product attention on `[L, heads*dh]` layouts.
/// Returns the output and the per-head attention probabilities
/// `[heads, lq, lk]`.
pub(crate) fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    lq: usize,
    lk: usize,
    width: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![T::ZERO; lq * width];
    let mut probs = vec![T::ZERO; heads * lq * lk];
    let mut kt = vec![0f64; dh * lk];
    let mut vh = vec![0f64; lk * dh];
    let mut scores = vec![0f64; lk];
    let mut acc = vec![0f64; dh];
    for h in 0..heads {
        let c0 = h * dh;
        for j in 0..lk {
            for c in 0..dh {
                kt[c * lk + j] = k[j * width + c0 + c].to_f64();
                vh[j * dh + c] = v[j * width + c0 + c].to_f64();
            }
        }
        for i in 0..lq {
            scores.iter_mut().for_each(|s| *s = 0.0);
            for c in 0..dh {
                let qv = q[i * width + c0 + c].to_f64();
                for (s, &kv) in scores.iter_mut().zip(&kt[c * lk..(c + 1) * lk]) {
                    *s += qv * kv;
                }
            }
            let mut mx = f64::NEG_INFINITY;
            for s in scores.iter_mut() {
                *s *= scale;
                mx = mx.max(*s);
            }
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
                sum += *s;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            let prow = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            for (j, s) in scores.iter().enumerate() {
                let p = s / sum;
                prow[j] = T::from_f64(p);
                for (a, &vv) in acc.iter_mut().zip(&vh[j * dh..(j + 1) * dh]) {
                    *a += p * vv;
                }
            }
            for c in 0..dh {
                out[i * width + c0 + c] = T::from_f64(acc[c]);
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention`] with respect to q, k, v.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    lq: usize,
    lk: usize,
    width: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0f64; lq * width];
    let mut dk = vec![0f64; lk * width];
    let mut dv = vec![0f64; lk * width];
    let mut vt = vec![0f64; dh * lk];
    let mut kh = vec![0f64; lk * dh];
    let mut dp = vec![0f64; lk];
    for h in 0..heads {
        let c0 = h * dh;
        for j in 0..lk {
            for c in 0..dh {
                vt[c * lk + j] = v[j * width + c0 + c].to_f64();
                kh[j * dh + c] = k[j * width + c0 + c].to_f64();
            }
        }
        for i in 0..lq {
            let prow = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let grow = &g[i * width + c0..i * width + c0 + dh];
            dp.iter_mut().for_each(|x| *x = 0.0);
            for c in 0..dh {
                let gv = grow[c].to_f64();
                for (d, &vv) in dp.iter_mut().zip(&vt[c * lk..(c + 1) * lk]) {
                    *d += gv * vv;
                }
            }
            let mut dot = 0.0;
            for j in 0..lk {
                let p = prow[j].to_f64();
                dot += p * dp[j];
                let dvrow = &mut dv[j * width + c0..j * width + c0 + dh];
                for (dvv, gv) in dvrow.iter_mut().zip(grow) {
                    *dvv += p * gv.to_f64();
                }
            }
            let qrow: Vec<f64> = (0..dh).map(|c| q[i * width + c0 + c].to_f64()).collect();
            let dqrow = &mut dq[i * width + c0..i * width + c0 + dh];
            for j in 0..lk {
                let ds = prow[j].to_f64() * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for (dqv, &kv) in dqrow.iter_mut().zip(&kh[j * dh..(j + 1) * dh]) {
                    *dqv += ds * kv;
                }
                let dkrow = &mut dk[j * width + c0..j * width + c0 + dh];
                for (dkv, &qv) in dkrow.iter_mut().zip(&qrow) {
                    *dkv += ds * qv;
                }
            }
        }
    }
    let cv = |x: Vec<f64>| x.into_iter().map(T::from_f64).collect();
    (cv(dq), cv(dk), cv(dv))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
