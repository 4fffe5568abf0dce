//! Multi-head softmax attention with optional rotary position embedding.
//!
//! Heads live in contiguous column blocks of the projected matrices. RoPE
//! rotates consecutive pairs `(2i, 2i+1)` within each head by
//! `p · base^(-2i/d_head)`; queries and keys each use their own positions.

use crate::error::{shape_err, Error, Result};
use crate::nn::{Linear, TensorRef};
use crate::tensor::{Matrix, Real};

/// Rotary embedding parameters for one attention call.
#[derive(Debug, Clone, Copy)]
pub struct Rope<'a> {
    pub q_positions: &'a [i64],
    pub k_positions: &'a [i64],
    pub base: f64,
}

/// Rotate each row of `x` (a single head, `[n × d_head]`) by its position.
pub fn apply_rope<T: Real>(x: &Matrix<T>, positions: &[i64], base: f64) -> Result<Matrix<T>> {
    rotate_heads(x, positions, base, 1, false)
}

/// Rotate every head block of `x`; `inverse` applies the transpose rotation.
pub fn rotate_heads<T: Real>(
    x: &Matrix<T>,
    positions: &[i64],
    base: f64,
    n_heads: usize,
    inverse: bool,
) -> Result<Matrix<T>> {
    if positions.len() != x.rows() {
        return Err(shape_err!(
            "{} positions for {} rows",
            positions.len(),
            x.rows()
        ));
    }
    if n_heads == 0 || !x.cols().is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "width {} not divisible into {n_heads} heads",
            x.cols()
        )));
    }
    let d_head = x.cols() / n_heads;
    if !d_head.is_multiple_of(2) {
        return Err(Error::Config(format!("RoPE needs an even head width, got {d_head}")));
    }
    let freqs: Vec<f64> = (0..d_head / 2)
        .map(|i| base.powf(-2.0 * i as f64 / d_head as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.clone();
    for (r, &p) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for (i, &f) in freqs.iter().enumerate() {
            let (s, c) = (sign * p as f64 * f).sin_cos();
            let (s, c) = (T::c(s), T::c(c));
            for h in 0..n_heads {
                let j = h * d_head + 2 * i;
                let (a, b) = (row[j], row[j + 1]);
                row[j] = a * c - b * s;
                row[j + 1] = a * s + b * c;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CoreCache<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    n_heads: usize,
    rope: Option<(Vec<i64>, Vec<i64>, f64)>,
}

impl<T: Real> CoreCache<T> {
    /// Per-head attention probabilities `[n_q × n_k]`.
    pub fn probs(&self) -> &[Matrix<T>] {
        &self.probs
    }
}

/// Pre-softmax logits per head after RoPE, `[n_q × n_k]` each.
pub fn attention_logits<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    n_heads: usize,
    rope: Option<Rope<'_>>,
) -> Result<Vec<Matrix<T>>> {
    let (q, k) = match rope {
        Some(r) => (
            rotate_heads(q, r.q_positions, r.base, n_heads, false)?,
            rotate_heads(k, r.k_positions, r.base, n_heads, false)?,
        ),
        None => (q.clone(), k.clone()),
    };
    let d_head = q.cols() / n_heads;
    let scale = T::c(1.0 / (d_head as f64).sqrt());
    (0..n_heads)
        .map(|h| {
            let qh = q.cols_slice(h * d_head, d_head);
            let kh = k.cols_slice(h * d_head, d_head);
            Ok(qh.matmul_bt(&kh)?.scale(scale))
        })
        .collect()
}

fn softmax_rows<T: Real>(m: &mut Matrix<T>) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// `softmax(QKᵀ/√d)·V` over heads, on already-projected `q`, `k`, `v`.
pub fn attend<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    n_heads: usize,
    rope: Option<Rope<'_>>,
) -> Result<(Matrix<T>, CoreCache<T>)> {
    if q.cols() != k.cols() || k.shape() != v.shape() {
        return Err(shape_err!(
            "attention q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if k.rows() == 0 {
        return Err(shape_err!("attention over zero keys"));
    }
    let (q, k) = match rope {
        Some(r) => (
            rotate_heads(q, r.q_positions, r.base, n_heads, false)?,
            rotate_heads(k, r.k_positions, r.base, n_heads, false)?,
        ),
        None => (q.clone(), k.clone()),
    };
    let d_head = q.cols() / n_heads;
    let scale = T::c(1.0 / (d_head as f64).sqrt());
    let mut out = Matrix::zeros(q.rows(), q.cols());
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.cols_slice(h * d_head, d_head);
        let kh = k.cols_slice(h * d_head, d_head);
        let vh = v.cols_slice(h * d_head, d_head);
        let mut p = qh.matmul_bt(&kh)?.scale(scale);
        softmax_rows(&mut p);
        out.set_cols(h * d_head, &p.matmul(&vh)?);
        probs.push(p);
    }
    let cache = CoreCache {
        q,
        k,
        v: v.clone(),
        probs,
        n_heads,
        rope: rope.map(|r| (r.q_positions.to_vec(), r.k_positions.to_vec(), r.base)),
    };
    Ok((out, cache))
}

/// Gradients `(dq, dk, dv)` with respect to the unrotated projections.
pub fn attend_backward<T: Real>(
    cache: &CoreCache<T>,
    d_out: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let n_heads = cache.n_heads;
    let d_head = cache.q.cols() / n_heads;
    let scale = T::c(1.0 / (d_head as f64).sqrt());
    let mut dq = Matrix::zeros(cache.q.rows(), cache.q.cols());
    let mut dk = Matrix::zeros(cache.k.rows(), cache.k.cols());
    let mut dv = Matrix::zeros(cache.v.rows(), cache.v.cols());
    for h in 0..n_heads {
        let p = &cache.probs[h];
        let doh = d_out.cols_slice(h * d_head, d_head);
        let qh = cache.q.cols_slice(h * d_head, d_head);
        let kh = cache.k.cols_slice(h * d_head, d_head);
        let vh = cache.v.cols_slice(h * d_head, d_head);
        dv.set_cols(h * d_head, &p.matmul_at(&doh)?);
        let dp = doh.matmul_bt(&vh)?;
        let mut ds = Matrix::zeros(p.rows(), p.cols());
        for r in 0..p.rows() {
            let pr = p.row(r);
            let dpr = dp.row(r);
            let inner: T = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
            for (c, (&pv, &dpv)) in pr.iter().zip(dpr).enumerate() {
                ds.set(r, c, pv * (dpv - inner) * scale);
            }
        }
        dq.set_cols(h * d_head, &ds.matmul(&kh)?);
        dk.set_cols(h * d_head, &ds.matmul_at(&qh)?);
    }
    if let Some((qp, kp, base)) = &cache.rope {
        dq = rotate_heads(&dq, qp, *base, n_heads, true)?;
        dk = rotate_heads(&dk, kp, *base, n_heads, true)?;
    }
    Ok((dq, dk, dv))
}

/// Projection weights of one attention sublayer: `Q`, fused `KV`, `O`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub q: Linear<T>,
    pub kv: Linear<T>,
    pub o: Linear<T>,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    q_in: Matrix<T>,
    kv_in: Matrix<T>,
    core: CoreCache<T>,
    mixed: Matrix<T>,
}

impl<T: Real> AttentionCache<T> {
    pub fn core(&self) -> &CoreCache<T> {
        &self.core
    }
}

impl<T: Real> AttentionWeights<T> {
    pub fn d_model(&self) -> usize {
        self.q.d_out()
    }

    pub fn forward(
        &self,
        q_in: &Matrix<T>,
        kv_in: &Matrix<T>,
        rope: Option<Rope<'_>>,
    ) -> Result<(Matrix<T>, AttentionCache<T>)> {
        if !q_in.is_finite() || !kv_in.is_finite() {
            return Err(Error::Numeric("non-finite attention input".into()));
        }
        let d = self.d_model();
        let q = self.q.forward(q_in)?;
        let kv = self.kv.forward(kv_in)?;
        let k = kv.cols_slice(0, d);
        let v = kv.cols_slice(d, d);
        let (mixed, core) = attend(&q, &k, &v, self.n_heads, rope)?;
        let out = self.o.forward(&mixed)?;
        Ok((
            out,
            AttentionCache {
                q_in: q_in.clone(),
                kv_in: kv_in.clone(),
                core,
                mixed,
            },
        ))
    }

    /// Returns `(dL/dq_in, dL/dkv_in)`; the latter only when `need_dkv`.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        d_out: &Matrix<T>,
        grad: Option<&mut AttentionWeights<T>>,
        need_dkv: bool,
    ) -> Result<(Matrix<T>, Option<Matrix<T>>)> {
        let d = self.d_model();
        let (gq, gkv, go) = match grad {
            Some(g) => (Some(&mut g.q), Some(&mut g.kv), Some(&mut g.o)),
            None => (None, None, None),
        };
        let dmixed = self.o.backward(&cache.mixed, d_out, go)?;
        let (dq, dk, dv) = attend_backward(&cache.core, &dmixed)?;
        let mut dkv = Matrix::zeros(dk.rows(), 2 * d);
        dkv.set_cols(0, &dk);
        dkv.set_cols(d, &dv);
        let dq_in = self.q.backward(&cache.q_in, &dq, gq)?;
        let dkv_in = if need_dkv {
            Some(self.kv.backward(&cache.kv_in, &dkv, gkv)?)
        } else {
            if let Some(g) = gkv {
                self.kv.accumulate(&cache.kv_in, &dkv, g)?;
            }
            None
        };
        Ok((dq_in, dkv_in))
    }

    pub fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.q.push_named(&format!("{prefix}.q"), out);
        self.kv.push_named(&format!("{prefix}.kv"), out);
        self.o.push_named(&format!("{prefix}.o"), out);
    }

    pub fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        self.q.push_mut(out);
        self.kv.push_mut(out);
        self.o.push_mut(out);
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            q: Linear::zeros(self.q.d_in(), self.q.d_out()),
            kv: Linear::zeros(self.kv.d_in(), self.kv.d_out()),
            o: Linear::zeros(self.o.d_in(), self.o.d_out()),
            n_heads: self.n_heads,
        }
    }
}

/// One projected attention sublayer as a standalone call.
///
/// `q_positions`/`kv_positions` switch RoPE on when both are given.
pub fn attention<T: Real>(
    q_in: &Matrix<T>,
    kv_in: &Matrix<T>,
    weights: &AttentionWeights<T>,
    q_positions: Option<&[i64]>,
    kv_positions: Option<&[i64]>,
    rope_base: Option<f64>,
) -> Result<Matrix<T>> {
    let rope = match (q_positions, kv_positions) {
        (Some(q_positions), Some(k_positions)) => Some(Rope {
            q_positions,
            k_positions,
            base: rope_base.unwrap_or(10_000.0),
        }),
        (None, None) => None,
        _ => return Err(shape_err!("RoPE needs positions for both queries and keys")),
    };
    Ok(weights.forward(q_in, kv_in, rope)?.0)
}
