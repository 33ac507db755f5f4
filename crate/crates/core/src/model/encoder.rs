//! Vision-transformer encoder: patch embedding, class token, learned
//! positional table (bilinearly resampled for other input sizes), pre-norm
//! transformer blocks and a final norm on the class token.

use super::EncoderConfig;
use crate::error::{shape_err, Result};
use crate::nn::attention::{attention, attention_backward, AttentionCache, AttentionDims};
use crate::nn::layers::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, LayerNormCache,
};
use crate::nn::linalg::{gemm, MatMut, MatRef};
use crate::nn::{Grads, ParamSet, Real};

/// Added to each input channel's variance before standardizing.
const INPUT_EPS: f64 = 1e-4;

/// Borrowed view of one encoder's parameters (`student.*` or `teacher.*`).
pub struct Encoder<'a, T: Real> {
    params: &'a ParamSet<T>,
    cfg: &'a EncoderConfig,
    prefix: &'a str,
}

struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    attn: AttentionCache<T>,
    attended: Vec<T>,
    ln2: LayerNormCache<T>,
    h2: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
}

pub struct EncoderCache<T> {
    batch: usize,
    grid: usize,
    patches: Vec<T>,
    resize: Option<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LayerNormCache<T>,
    normed_cls: Vec<T>,
}

impl<T> EncoderCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Row-stochastic bilinear resampling matrix (`dst² × src²`) for a square
/// grid, using half-pixel centers.
pub fn grid_resize_matrix(src: usize, dst: usize) -> Vec<f64> {
    let axis: Vec<Vec<(usize, f64)>> = (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let f = pos - i0 as f64;
            if i0 == i1 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - f), (i1, f)]
            }
        })
        .collect();
    let mut m = vec![0.0; dst * dst * src * src];
    for y in 0..dst {
        for x in 0..dst {
            let row = y * dst + x;
            for &(sy, wy) in &axis[y] {
                for &(sx, wx) in &axis[x] {
                    m[row * src * src + sy * src + sx] += wy * wx;
                }
            }
        }
    }
    m
}

impl<'a, T: Real> Encoder<'a, T> {
    pub fn new(params: &'a ParamSet<T>, cfg: &'a EncoderConfig, prefix: &'a str) -> Self {
        Self {
            params,
            cfg,
            prefix,
        }
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    fn has_projection(&self) -> bool {
        self.cfg.embed_dim != self.cfg.width
    }

    /// NCHW pixels → `[n·g², c·p·p]` rows ordered (channel, row, column) within a patch.
    /// Each channel of each image is first shifted and scaled to zero mean and
    /// unit variance, so tokens carry structure rather than overall brightness.
    fn patchify(&self, pixels: &[f32], n: usize, size: usize) -> Vec<T> {
        let p = self.cfg.patch_size;
        let c = self.cfg.channels;
        let g = size / p;
        let dim = c * p * p;
        let plane_len = size * size;
        let moments: Vec<(f64, f64)> = pixels
            .chunks_exact(plane_len)
            .map(|plane| {
                let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / plane_len as f64;
                let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane_len as f64;
                (mean, 1.0 / (var + INPUT_EPS).sqrt())
            })
            .collect();
        let mut out = vec![T::zero(); n * g * g * dim];
        for b in 0..n {
            for gy in 0..g {
                for gx in 0..g {
                    let row = &mut out[((b * g + gy) * g + gx) * dim..][..dim];
                    for ch in 0..c {
                        let plane = &pixels[(b * c + ch) * plane_len..];
                        let (mean, inv_std) = moments[b * c + ch];
                        for py in 0..p {
                            let src = &plane[(gy * p + py) * size + gx * p..][..p];
                            let dst = &mut row[(ch * p + py) * p..][..p];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = T::lit((s as f64 - mean) * inv_std);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Encodes `n` square images of side `size`; returns `[n, embed_dim]` class-token embeddings.
    pub fn forward(&self, pixels: &[f32], n: usize, size: usize) -> Result<(Vec<T>, EncoderCache<T>)> {
        let cfg = self.cfg;
        if size % cfg.patch_size != 0 {
            return Err(shape_err!(
                "input size {size} is not a multiple of patch size {}",
                cfg.patch_size
            ));
        }
        if pixels.len() != n * cfg.channels * size * size {
            return Err(shape_err!(
                "expected {n} images of {}x{size}x{size}, got {} values",
                cfg.channels,
                pixels.len()
            ));
        }
        let w = cfg.width;
        let g = size / cfg.patch_size;
        let g0 = cfg.grid();
        let tokens = g * g + 1;

        let patches = self.patchify(pixels, n, size);
        let embedded = linear(self.params, &self.name("patch_embed"), &patches, n * g * g)?;
        let pos = self.params.get(&self.name("pos_embed"))?.data();
        let cls = self.params.get(&self.name("cls_token"))?.data();
        let (pos_patch, resize) = if g == g0 {
            (pos[w..].to_vec(), None)
        } else {
            let r: Vec<T> = grid_resize_matrix(g0, g).into_iter().map(T::lit).collect();
            let mut pp = vec![T::zero(); g * g * w];
            gemm(
                T::one(),
                MatRef::new(&r, g * g, g0 * g0),
                MatRef::strided(pos, w, g0 * g0, w, w, 1),
                T::zero(),
                MatMut::new(&mut pp, g * g, w),
            );
            (pp, Some(r))
        };

        let mut x = vec![T::zero(); n * tokens * w];
        for b in 0..n {
            let img = &mut x[b * tokens * w..(b + 1) * tokens * w];
            for i in 0..w {
                img[i] = cls[i] + pos[i];
            }
            let src = &embedded[b * g * g * w..(b + 1) * g * g * w];
            for (dst, (e, p)) in img[w..].iter_mut().zip(src.iter().zip(&pos_patch)) {
                *dst = *e + *p;
            }
        }

        let mut blocks = Vec::with_capacity(cfg.depth);
        for d in 0..cfg.depth {
            let (next, cache) = self.block_forward(d, &x, n, tokens)?;
            x = next;
            blocks.push(cache);
        }

        let mut cls_rows = vec![T::zero(); n * w];
        for b in 0..n {
            cls_rows[b * w..(b + 1) * w].copy_from_slice(&x[b * tokens * w..b * tokens * w + w]);
        }
        let (normed, final_ln) = layer_norm(self.params, &self.name("norm"), &cls_rows, n)?;
        let out = if self.has_projection() {
            linear(self.params, &self.name("embed_proj"), &normed, n)?
        } else {
            normed.clone()
        };
        Ok((
            out,
            EncoderCache {
                batch: n,
                grid: g,
                patches,
                resize,
                blocks,
                final_ln,
                normed_cls: normed,
            },
        ))
    }

    fn block_forward(
        &self,
        d: usize,
        x: &[T],
        n: usize,
        tokens: usize,
    ) -> Result<(Vec<T>, BlockCache<T>)> {
        let rows = n * tokens;
        let p = |s: &str| self.name(&format!("block{d}.{s}"));
        let (h1, ln1) = layer_norm(self.params, &p("ln1"), x, rows)?;
        let qkv = linear(self.params, &p("attn.qkv"), &h1, rows)?;
        let dims = AttentionDims {
            batch: n,
            tokens,
            width: self.cfg.width,
            heads: self.cfg.heads,
        };
        let (attended, attn) = attention(&qkv, dims);
        let projected = linear(self.params, &p("attn.proj"), &attended, rows)?;
        let x2: Vec<T> = x.iter().zip(&projected).map(|(&a, &b)| a + b).collect();
        let (h2, ln2) = layer_norm(self.params, &p("ln2"), &x2, rows)?;
        let pre_act = linear(self.params, &p("mlp.fc1"), &h2, rows)?;
        let act = gelu(&pre_act);
        let mlp_out = linear(self.params, &p("mlp.fc2"), &act, rows)?;
        let x3 = x2.iter().zip(&mlp_out).map(|(&a, &b)| a + b).collect();
        Ok((
            x3,
            BlockCache {
                ln1,
                h1,
                qkv,
                attn,
                attended,
                ln2,
                h2,
                pre_act,
                act,
            },
        ))
    }

    fn block_backward(
        &self,
        d: usize,
        cache: &BlockCache<T>,
        dx3: Vec<T>,
        n: usize,
        tokens: usize,
        grads: &mut Grads<T>,
    ) -> Result<Vec<T>> {
        let rows = n * tokens;
        let p = |s: &str| self.name(&format!("block{d}.{s}"));
        let d_act = linear_backward(self.params, &p("mlp.fc2"), &cache.act, rows, &dx3, grads, true)?
            .expect("dx requested");
        let d_pre = gelu_backward(&cache.pre_act, &d_act);
        let dh2 = linear_backward(self.params, &p("mlp.fc1"), &cache.h2, rows, &d_pre, grads, true)?
            .expect("dx requested");
        let d_ln2 = layer_norm_backward(self.params, &p("ln2"), &cache.ln2, &dh2, grads)?;
        let dx2: Vec<T> = dx3.iter().zip(&d_ln2).map(|(&a, &b)| a + b).collect();
        let d_att = linear_backward(
            self.params,
            &p("attn.proj"),
            &cache.attended,
            rows,
            &dx2,
            grads,
            true,
        )?
        .expect("dx requested");
        let dims = AttentionDims {
            batch: n,
            tokens,
            width: self.cfg.width,
            heads: self.cfg.heads,
        };
        let dqkv = attention_backward(&cache.qkv, &cache.attn, &d_att, dims);
        let dh1 = linear_backward(self.params, &p("attn.qkv"), &cache.h1, rows, &dqkv, grads, true)?
            .expect("dx requested");
        let d_ln1 = layer_norm_backward(self.params, &p("ln1"), &cache.ln1, &dh1, grads)?;
        Ok(dx2.iter().zip(&d_ln1).map(|(&a, &b)| a + b).collect())
    }

    /// Accumulates parameter gradients given `dL/d(embedding)`.
    pub fn backward(&self, cache: &EncoderCache<T>, d_out: &[T], grads: &mut Grads<T>) -> Result<()> {
        let cfg = self.cfg;
        let n = cache.batch;
        let w = cfg.width;
        let g = cache.grid;
        let g0 = cfg.grid();
        let tokens = g * g + 1;
        if d_out.len() != n * cfg.embed_dim {
            return Err(shape_err!("encoder backward: gradient has wrong size"));
        }
        let d_normed = if self.has_projection() {
            linear_backward(
                self.params,
                &self.name("embed_proj"),
                &cache.normed_cls,
                n,
                d_out,
                grads,
                true,
            )?
            .expect("dx requested")
        } else {
            d_out.to_vec()
        };
        let d_cls = layer_norm_backward(self.params, &self.name("norm"), &cache.final_ln, &d_normed, grads)?;
        let mut dx = vec![T::zero(); n * tokens * w];
        for b in 0..n {
            dx[b * tokens * w..b * tokens * w + w].copy_from_slice(&d_cls[b * w..(b + 1) * w]);
        }
        for d in (0..cfg.depth).rev() {
            dx = self.block_backward(d, &cache.blocks[d], dx, n, tokens, grads)?;
        }

        // token assembly
        let mut d_pos_patch = vec![T::zero(); g * g * w];
        let mut d_embedded = vec![T::zero(); n * g * g * w];
        {
            let d_cls_tok = grads.slot(&self.name("cls_token"), w);
            for b in 0..n {
                for i in 0..w {
                    d_cls_tok[i] += dx[b * tokens * w + i];
                }
            }
        }
        {
            let d_pos = grads.slot(&self.name("pos_embed"), (g0 * g0 + 1) * w);
            for b in 0..n {
                for i in 0..w {
                    d_pos[i] += dx[b * tokens * w + i];
                }
            }
        }
        for b in 0..n {
            let src = &dx[b * tokens * w + w..(b + 1) * tokens * w];
            d_embedded[b * g * g * w..(b + 1) * g * g * w].copy_from_slice(src);
            for (acc, &v) in d_pos_patch.iter_mut().zip(src) {
                *acc += v;
            }
        }
        {
            let d_pos = grads.slot(&self.name("pos_embed"), (g0 * g0 + 1) * w);
            match &cache.resize {
                None => {
                    for (acc, &v) in d_pos[w..].iter_mut().zip(&d_pos_patch) {
                        *acc += v;
                    }
                }
                Some(r) => gemm(
                    T::one(),
                    MatRef::new(r, g * g, g0 * g0).t(),
                    MatRef::new(&d_pos_patch, g * g, w),
                    T::one(),
                    MatMut::strided(d_pos, w, g0 * g0, w, w, 1),
                ),
            }
        }
        linear_backward(
            self.params,
            &self.name("patch_embed"),
            &cache.patches,
            n * g * g,
            &d_embedded,
            grads,
            false,
        )?;
        Ok(())
    }
}
