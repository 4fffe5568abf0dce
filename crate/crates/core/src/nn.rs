//! Layers with hand-written backward passes.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};
use crate::tensor::{Matrix, Real};

/// Borrowed view of one named parameter tensor.
#[derive(Debug)]
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// A collection of named parameter tensors.
///
/// `named` and `slices_mut` must list tensors in the same order.
pub trait ParamSet<T: Real> {
    fn named(&self) -> Vec<TensorRef<'_, T>>;
    fn slices_mut(&mut self) -> Vec<&mut [T]>;

    fn scalar_count(&self) -> usize {
        self.named().iter().map(|t| t.data.len()).sum()
    }
}

/// Affine map `y = x·W + b`, with `W` stored as `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_in, d_out),
            bias: vec![T::zero(); d_out],
        }
    }

    /// Gaussian weights with std `gain / √d_in`, zero bias. Values are rounded
    /// through `f32` so fp32 serialization is lossless.
    pub fn random(rng: &mut impl Rng, d_in: usize, d_out: usize, gain: f64) -> Self {
        let std = gain / (d_in as f64).sqrt();
        let weight = Matrix::from_fn(d_in, d_out, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            T::c((z * std) as f32 as f64)
        });
        Self {
            weight,
            bias: vec![T::zero(); d_out],
        }
    }

    /// Random weights rescaled so the largest singular value equals `target`.
    pub fn spectral(rng: &mut impl Rng, d_in: usize, d_out: usize, target: f64) -> Self {
        let mut lin = Self::random(rng, d_in, d_out, 1.0);
        let sigma = spectral_norm(&lin.weight);
        if sigma > 0.0 {
            let s = target / sigma;
            lin.weight = lin.weight.map(|w| T::c((w.f64() * s) as f32 as f64));
        }
        lin
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.d_in() {
            return Err(shape_err!(
                "linear expects width {}, got {}",
                self.d_in(),
                x.cols()
            ));
        }
        let mut y = x.matmul(&self.weight)?;
        for r in 0..y.rows() {
            for (v, &b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v = *v + b;
            }
        }
        Ok(y)
    }

    /// Accumulate parameter gradients into `grad` (when given) and return `dL/dx`.
    pub fn backward(
        &self,
        x: &Matrix<T>,
        dy: &Matrix<T>,
        grad: Option<&mut Linear<T>>,
    ) -> Result<Matrix<T>> {
        if let Some(g) = grad {
            self.accumulate(x, dy, g)?;
        }
        dy.matmul_bt(&self.weight)
    }

    /// Parameter gradients only; used where the input is a constant.
    pub fn accumulate(&self, x: &Matrix<T>, dy: &Matrix<T>, g: &mut Linear<T>) -> Result<()> {
        g.weight.add_assign(&x.matmul_at(dy)?)?;
        for (gb, s) in g.bias.iter_mut().zip(dy.col_sums()) {
            *gb = *gb + s;
        }
        Ok(())
    }

    pub fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        out.push(TensorRef {
            name: format!("{prefix}.weight"),
            shape: vec![self.d_in(), self.d_out()],
            data: self.weight.data(),
        });
        out.push(TensorRef {
            name: format!("{prefix}.bias"),
            shape: vec![self.d_out()],
            data: &self.bias,
        });
    }

    pub fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        out.push(self.weight.data_mut());
        out.push(&mut self.bias);
    }
}

/// Largest singular value by power iteration on `WᵀW`.
pub fn spectral_norm<T: Real>(w: &Matrix<T>) -> f64 {
    let w = w.cast::<f64>();
    let mut v = Matrix::filled(w.cols(), 1, 1.0 / (w.cols() as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..50 {
        let u = w.matmul(&v).expect("shape");
        let wtu = w.matmul_at(&u).expect("shape");
        let n = wtu.sum_sq().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        v = wtu.scale(1.0 / n);
        sigma = w.matmul(&v).expect("shape").sum_sq().sqrt();
    }
    sigma
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
}

pub const LN_EPS: f64 = 1e-5;

impl<T: Real> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: vec![T::one(); d],
            beta: vec![T::zero(); d],
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            gamma: vec![T::zero(); d],
            beta: vec![T::zero(); d],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, LayerNormCache<T>)> {
        let d = self.dim();
        if x.cols() != d {
            return Err(shape_err!("layer norm expects width {d}, got {}", x.cols()));
        }
        let n = T::c(d as f64);
        let mut xhat = Matrix::zeros(x.rows(), d);
        let mut y = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::c(LN_EPS)).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                y.set(r, c, h * self.gamma[c] + self.beta[c]);
            }
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache<T>,
        dy: &Matrix<T>,
        grad: Option<&mut LayerNorm<T>>,
    ) -> Matrix<T> {
        let d = self.dim();
        let n = T::c(d as f64);
        if let Some(g) = grad {
            for r in 0..dy.rows() {
                for c in 0..d {
                    g.gamma[c] = g.gamma[c] + dy.get(r, c) * cache.xhat.get(r, c);
                    g.beta[c] = g.beta[c] + dy.get(r, c);
                }
            }
        }
        let mut dx = Matrix::zeros(dy.rows(), d);
        for r in 0..dy.rows() {
            let xh = cache.xhat.row(r);
            let dxhat: Vec<T> = (0..d).map(|c| dy.get(r, c) * self.gamma[c]).collect();
            let m1 = dxhat.iter().copied().sum::<T>() / n;
            let m2 = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
            let is = cache.inv_std[r];
            for c in 0..d {
                dx.set(r, c, is * (dxhat[c] - m1 - xh[c] * m2));
            }
        }
        dx
    }

    pub fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        out.push(TensorRef {
            name: format!("{prefix}.gamma"),
            shape: vec![self.dim()],
            data: &self.gamma,
        });
        out.push(TensorRef {
            name: format!("{prefix}.beta"),
            shape: vec![self.dim()],
            data: &self.beta,
        });
    }

    pub fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let inner = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let inner = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    let th = inner.tanh();
    let dinner = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x * x);
    T::c(0.5) * (T::one() + th) + T::c(0.5) * x * (T::one() - th * th) * dinner
}

/// Two-layer GELU MLP: `W2·gelu(W1·x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pre: Matrix<T>,
    act: Matrix<T>,
}

impl<T: Real> Mlp<T> {
    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, MlpCache<T>)> {
        let pre = self.fc1.forward(x)?;
        let act = pre.map(gelu);
        let y = self.fc2.forward(&act)?;
        Ok((y, MlpCache { pre, act }))
    }

    /// Returns `dL/dx` when `need_dx`.
    pub fn backward(
        &self,
        x: &Matrix<T>,
        cache: &MlpCache<T>,
        dy: &Matrix<T>,
        grad: Option<&mut Mlp<T>>,
        need_dx: bool,
    ) -> Result<Option<Matrix<T>>> {
        let (g1, g2) = match grad {
            Some(g) => (Some(&mut g.fc1), Some(&mut g.fc2)),
            None => (None, None),
        };
        let dact = self.fc2.backward(&cache.act, dy, g2)?;
        let dpre = dact.zip_map(&cache.pre, "gelu'", |d, p| d * gelu_grad(p))?;
        if need_dx {
            Ok(Some(self.fc1.backward(x, &dpre, g1)?))
        } else {
            if let Some(g) = g1 {
                self.fc1.accumulate(x, &dpre, g)?;
            }
            Ok(None)
        }
    }
}
