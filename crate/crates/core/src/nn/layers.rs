//! Dense layers with hand-written backward passes.
//!
//! Activations are flat row-major buffers; a layer's parameters live in a
//! [`ParamSet`] under `{name}.weight` / `{name}.bias`.

use super::linalg::{gemm, MatMut, MatRef};
use super::{Grads, ParamSet, Real};
use crate::error::{shape_err, Result};

fn weight_dims<T: Real>(params: &ParamSet<T>, name: &str) -> Result<(usize, usize)> {
    let w = params.get(&format!("{name}.weight"))?;
    match w.shape() {
        [out, inp] => Ok((*out, *inp)),
        s => Err(shape_err!("{name}.weight must be 2-D, got {s:?}")),
    }
}

/// `y = x·Wᵀ + b` for `rows` input rows.
pub fn linear<T: Real>(params: &ParamSet<T>, name: &str, x: &[T], rows: usize) -> Result<Vec<T>> {
    let (out, inp) = weight_dims(params, name)?;
    if x.len() != rows * inp {
        return Err(shape_err!(
            "{name}: input has {} elements, expected {rows}x{inp}",
            x.len()
        ));
    }
    let w = params.get(&format!("{name}.weight"))?;
    let mut y = vec![T::zero(); rows * out];
    gemm(
        T::one(),
        MatRef::new(x, rows, inp),
        MatRef::new(w.data(), out, inp).t(),
        T::zero(),
        MatMut::new(&mut y, rows, out),
    );
    let bias_name = format!("{name}.bias");
    if params.contains(&bias_name) {
        let b = params.get(&bias_name)?.data();
        for row in y.chunks_exact_mut(out) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += *bv;
            }
        }
    }
    Ok(y)
}

/// Accumulates weight/bias gradients and optionally returns `dL/dx`.
pub fn linear_backward<T: Real>(
    params: &ParamSet<T>,
    name: &str,
    x: &[T],
    rows: usize,
    dy: &[T],
    grads: &mut Grads<T>,
    need_dx: bool,
) -> Result<Option<Vec<T>>> {
    let (out, inp) = weight_dims(params, name)?;
    if dy.len() != rows * out || x.len() != rows * inp {
        return Err(shape_err!("{name}: backward buffer size mismatch"));
    }
    let wname = format!("{name}.weight");
    {
        let gw = grads.slot(&wname, out * inp);
        gemm(
            T::one(),
            MatRef::new(dy, rows, out).t(),
            MatRef::new(x, rows, inp),
            T::one(),
            MatMut::new(gw, out, inp),
        );
    }
    let bias_name = format!("{name}.bias");
    if params.contains(&bias_name) {
        let gb = grads.slot(&bias_name, out);
        for row in dy.chunks_exact(out) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += *d;
            }
        }
    }
    if !need_dx {
        return Ok(None);
    }
    let w = params.get(&wname)?;
    let mut dx = vec![T::zero(); rows * inp];
    gemm(
        T::one(),
        MatRef::new(dy, rows, out),
        MatRef::new(w.data(), out, inp),
        T::zero(),
        MatMut::new(&mut dx, rows, inp),
    );
    Ok(Some(dx))
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

pub const LN_EPS: f64 = 1e-6;

pub fn layer_norm<T: Real>(
    params: &ParamSet<T>,
    name: &str,
    x: &[T],
    rows: usize,
) -> Result<(Vec<T>, LayerNormCache<T>)> {
    let gamma = params.get(&format!("{name}.weight"))?.data();
    let beta = params.get(&format!("{name}.bias"))?.data();
    let width = gamma.len();
    if x.len() != rows * width {
        return Err(shape_err!("{name}: layer-norm input size mismatch"));
    }
    let eps = T::lit(LN_EPS);
    let inv_w = T::lit(1.0 / width as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * width..(r + 1) * width];
        let mean = xr.iter().copied().sum::<T>() * inv_w;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * width..(r + 1) * width];
        let yr = &mut y[r * width..(r + 1) * width];
        for i in 0..width {
            let h = (xr[i] - mean) * rs;
            xh[i] = h;
            yr[i] = h * gamma[i] + beta[i];
        }
    }
    Ok((y, LayerNormCache { xhat, rstd }))
}

pub fn layer_norm_backward<T: Real>(
    params: &ParamSet<T>,
    name: &str,
    cache: &LayerNormCache<T>,
    dy: &[T],
    grads: &mut Grads<T>,
) -> Result<Vec<T>> {
    let gname = format!("{name}.weight");
    let gamma = params.get(&gname)?.data();
    let width = gamma.len();
    let rows = cache.rstd.len();
    if dy.len() != rows * width {
        return Err(shape_err!("{name}: layer-norm backward size mismatch"));
    }
    {
        let gg = grads.slot(&gname, width);
        for r in 0..rows {
            let xh = &cache.xhat[r * width..(r + 1) * width];
            let d = &dy[r * width..(r + 1) * width];
            for i in 0..width {
                gg[i] += d[i] * xh[i];
            }
        }
    }
    {
        let gb = grads.slot(&format!("{name}.bias"), width);
        for d in dy.chunks_exact(width) {
            for i in 0..width {
                gb[i] += d[i];
            }
        }
    }
    let inv_w = T::lit(1.0 / width as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); width];
    for r in 0..rows {
        let xh = &cache.xhat[r * width..(r + 1) * width];
        let d = &dy[r * width..(r + 1) * width];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for i in 0..width {
            dxhat[i] = d[i] * gamma[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d = mean_d * inv_w;
        mean_dx = mean_dx * inv_w;
        let rs = cache.rstd[r];
        let out = &mut dx[r * width..(r + 1) * width];
        for i in 0..width {
            out[i] = rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    Ok(dx)
}

const GELU_K: f64 = 1.702;

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).fast_exp())
}

/// GELU in its sigmoid form, `x·σ(1.702x)`.
pub fn gelu<T: Real>(x: &[T]) -> Vec<T> {
    let k = T::lit(GELU_K);
    x.iter().map(|&v| v * sigmoid(k * v)).collect()
}

pub fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    let k = T::lit(GELU_K);
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(k * v);
            d * (s + k * v * s * (T::one() - s))
        })
        .collect()
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

pub fn relu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RowNormCache<T> {
    normalized: Vec<T>,
    norms: Vec<T>,
}

impl<T: Real> RowNormCache<T> {
    pub fn normalized(&self) -> &[T] {
        &self.normalized
    }
}

/// Rescales each row to unit L2 norm (norm clamped below by `eps`).
pub fn l2_normalize_rows<T: Real>(x: &[T], cols: usize, eps: f64) -> RowNormCache<T> {
    let eps = T::lit(eps);
    let mut normalized = vec![T::zero(); x.len()];
    let mut norms = Vec::with_capacity(x.len() / cols.max(1));
    for (src, dst) in x.chunks_exact(cols).zip(normalized.chunks_exact_mut(cols)) {
        let n = src.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        norms.push(n);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s / n;
        }
    }
    RowNormCache { normalized, norms }
}

pub fn l2_normalize_rows_backward<T: Real>(cache: &RowNormCache<T>, dy: &[T], cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    for (r, &n) in cache.norms.iter().enumerate() {
        let u = &cache.normalized[r * cols..(r + 1) * cols];
        let d = &dy[r * cols..(r + 1) * cols];
        let dot = u.iter().zip(d).map(|(&a, &b)| a * b).sum::<T>();
        for i in 0..cols {
            dx[r * cols + i] = (d[i] - u[i] * dot) / n;
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub struct WeightNormCache<T> {
    rows: RowNormCache<T>,
}

/// Bias-free linear layer whose weight rows are renormalized to unit length
/// on every forward (`{name}.weight` holds the unnormalized directions).
pub fn weight_norm_linear<T: Real>(
    params: &ParamSet<T>,
    name: &str,
    x: &[T],
    rows: usize,
) -> Result<(Vec<T>, WeightNormCache<T>)> {
    let (out, inp) = weight_dims(params, name)?;
    if x.len() != rows * inp {
        return Err(shape_err!("{name}: weight-norm input size mismatch"));
    }
    let w = params.get(&format!("{name}.weight"))?;
    let wn = l2_normalize_rows(w.data(), inp, 1e-12);
    let mut y = vec![T::zero(); rows * out];
    gemm(
        T::one(),
        MatRef::new(x, rows, inp),
        MatRef::new(wn.normalized(), out, inp).t(),
        T::zero(),
        MatMut::new(&mut y, rows, out),
    );
    Ok((y, WeightNormCache { rows: wn }))
}

pub fn weight_norm_linear_backward<T: Real>(
    params: &ParamSet<T>,
    name: &str,
    cache: &WeightNormCache<T>,
    x: &[T],
    rows: usize,
    dy: &[T],
    grads: &mut Grads<T>,
) -> Result<Vec<T>> {
    let (out, inp) = weight_dims(params, name)?;
    let mut dwn = vec![T::zero(); out * inp];
    gemm(
        T::one(),
        MatRef::new(dy, rows, out).t(),
        MatRef::new(x, rows, inp),
        T::zero(),
        MatMut::new(&mut dwn, out, inp),
    );
    let dw = l2_normalize_rows_backward(&cache.rows, &dwn, inp);
    let gw = grads.slot(&format!("{name}.weight"), out * inp);
    for (g, d) in gw.iter_mut().zip(&dw) {
        *g += *d;
    }
    let mut dx = vec![T::zero(); rows * inp];
    gemm(
        T::one(),
        MatRef::new(dy, rows, out),
        MatRef::new(cache.rows.normalized(), out, inp),
        T::zero(),
        MatMut::new(&mut dx, rows, inp),
    );
    Ok(dx)
}

/// Softmax over each row of a `rows × cols` buffer, in place.
pub fn softmax_rows_in_place<T: Real>(x: &mut [T], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
        for v in row.iter_mut() {
            *v = (*v - max).fast_exp();
        }
        let inv = T::one() / lane_sum(row);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Sum with eight independent accumulators so the loop vectorizes.
fn lane_sum<T: Real>(x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    let mut s = acc.iter().fold(T::zero(), |a, &b| a + b);
    for &v in tail {
        s += v;
    }
    s
}
