//! Multi-head scaled dot-product self-attention over a packed QKV buffer.
//!
//! `qkv` is laid out `[n, tokens, 3, heads, head_dim]`, i.e. each token row
//! holds all queries, then all keys, then all values.

use super::layers::softmax_rows_in_place;
use super::linalg::{gemm, MatMut, MatRef};
use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub batch: usize,
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttentionDims {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn scale<T: Real>(&self) -> T {
        T::lit(1.0 / (self.head_dim() as f64).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    /// Softmax probabilities, `[n, heads, tokens, tokens]`.
    probs: Vec<T>,
}

/// `c = a·b` for small contiguous row-major operands, `a` is `m×k`, `b` is
/// `k×n`. The i-k-j order keeps the inner loop a plain axpy, which
/// vectorizes; at attention sizes this beats a packed GEMM.
fn small_matmul<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        row.fill(T::zero());
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (cv, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose<T: Real>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Copies one head's `t×dh` block out of a row-strided buffer, times `alpha`.
fn gather<T: Real>(src: &[T], offset: usize, stride: usize, t: usize, dh: usize, alpha: T, dst: &mut [T]) {
    for i in 0..t {
        let s = &src[offset + i * stride..offset + i * stride + dh];
        for (d, &v) in dst[i * dh..(i + 1) * dh].iter_mut().zip(s) {
            *d = v * alpha;
        }
    }
}

fn scatter<T: Real>(src: &[T], dst: &mut [T], offset: usize, stride: usize, t: usize, dh: usize) {
    for i in 0..t {
        dst[offset + i * stride..offset + i * stride + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

/// Returns the attended values `[n·tokens, width]` and the probability cache.
pub fn attention<T: Real>(qkv: &[T], dims: AttentionDims) -> (Vec<T>, AttentionCache<T>) {
    let AttentionDims {
        batch,
        tokens: t,
        width: w,
        heads,
    } = dims;
    let dh = dims.head_dim();
    assert_eq!(qkv.len(), batch * t * 3 * w, "qkv buffer size");
    let scale = dims.scale::<T>();
    let mut probs = vec![T::zero(); batch * heads * t * t];
    let mut out = vec![T::zero(); batch * t * w];
    let mut q = vec![T::zero(); t * dh];
    let mut k = vec![T::zero(); t * dh];
    let mut kt = vec![T::zero(); t * dh];
    let mut v = vec![T::zero(); t * dh];
    let mut o = vec![T::zero(); t * dh];
    for b in 0..batch {
        for h in 0..heads {
            let base = b * t * 3 * w + h * dh;
            gather(qkv, base, 3 * w, t, dh, scale, &mut q);
            gather(qkv, base + w, 3 * w, t, dh, T::one(), &mut k);
            gather(qkv, base + 2 * w, 3 * w, t, dh, T::one(), &mut v);
            transpose(&k, t, dh, &mut kt);
            let p_off = (b * heads + h) * t * t;
            let p = &mut probs[p_off..p_off + t * t];
            small_matmul(&q, &kt, p, t, dh, t);
            softmax_rows_in_place(p, t);
            small_matmul(p, &v, &mut o, t, t, dh);
            scatter(&o, &mut out, b * t * w + h * dh, w, t, dh);
        }
    }
    (out, AttentionCache { probs })
}

/// Gradient with respect to the packed QKV buffer.
pub fn attention_backward<T: Real>(
    qkv: &[T],
    cache: &AttentionCache<T>,
    d_out: &[T],
    dims: AttentionDims,
) -> Vec<T> {
    let AttentionDims {
        batch,
        tokens: t,
        width: w,
        heads,
    } = dims;
    let dh = dims.head_dim();
    let scale = dims.scale::<T>();
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut dp = vec![T::zero(); t * t];
    let mut v = vec![T::zero(); t * dh];
    let mut vt = vec![T::zero(); t * dh];
    let mut d_o = vec![T::zero(); t * dh];
    for b in 0..batch {
        for h in 0..heads {
            let base = b * t * 3 * w + h * dh;
            let o_off = b * t * w + h * dh;
            let p_off = (b * heads + h) * t * t;
            let p = &cache.probs[p_off..p_off + t * t];
            // dP = dO·Vᵀ
            gather(d_out, o_off, w, t, dh, T::one(), &mut d_o);
            gather(qkv, base + 2 * w, 3 * w, t, dh, T::one(), &mut v);
            transpose(&v, t, dh, &mut vt);
            small_matmul(&d_o, &vt, &mut dp, t, dh, t);
            // dV = Pᵀ·dO
            gemm(
                T::one(),
                MatRef::new(p, t, t).t(),
                MatRef::new(&d_o, t, dh),
                T::zero(),
                MatMut::strided(&mut dqkv, base + 2 * w, t, dh, 3 * w, 1),
            );
            // softmax backward, in place on dp
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut dp[i * t..(i + 1) * t];
                let dot = pr.iter().zip(dr.iter()).map(|(&a, &c)| a * c).sum::<T>();
                for j in 0..t {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
            }
            // dQ = scale·dS·K, dK = scale·dSᵀ·Q
            gemm(
                scale,
                MatRef::new(&dp, t, t),
                MatRef::strided(qkv, base + w, t, dh, 3 * w, 1),
                T::zero(),
                MatMut::strided(&mut dqkv, base, t, dh, 3 * w, 1),
            );
            gemm(
                scale,
                MatRef::new(&dp, t, t).t(),
                MatRef::strided(qkv, base, t, dh, 3 * w, 1),
                T::zero(),
                MatMut::strided(&mut dqkv, base + w, t, dh, 3 * w, 1),
            );
        }
    }
    dqkv
}
