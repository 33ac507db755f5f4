//! Modality-specific pixel decoders: a linear projection to a small seed map
//! followed by four stride-2 transposed-convolution stages.

use super::config::DECODER_STAGES;
use super::EncoderConfig;
use crate::error::{shape_err, Result};
use crate::nn::conv::{conv_transpose, conv_transpose_backward, MapDims};
use crate::nn::layers::{linear, linear_backward, relu, relu_backward};
use crate::nn::{Grads, ParamSet, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    He,
    Sim,
}

impl DecoderKind {
    pub fn prefix(self) -> &'static str {
        match self {
            DecoderKind::He => "dec_he",
            DecoderKind::Sim => "dec_sim",
        }
    }
}

pub struct Decoder<'a> {
    cfg: &'a EncoderConfig,
    prefix: &'static str,
}

pub struct DecoderCache<T> {
    batch: usize,
    z: Vec<T>,
    seed_pre: Vec<T>,
    /// Input map and pre-activation output of each stage.
    stages: Vec<(Vec<T>, MapDims, Vec<T>)>,
}

fn nhwc_to_nchw<T: Real>(x: &[T], d: MapDims) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let hw = d.height * d.width;
    for b in 0..d.batch {
        for p in 0..hw {
            for c in 0..d.channels {
                out[(b * d.channels + c) * hw + p] = x[(b * hw + p) * d.channels + c];
            }
        }
    }
    out
}

fn nchw_to_nhwc<T: Real>(x: &[T], d: MapDims) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let hw = d.height * d.width;
    for b in 0..d.batch {
        for p in 0..hw {
            for c in 0..d.channels {
                out[(b * hw + p) * d.channels + c] = x[(b * d.channels + c) * hw + p];
            }
        }
    }
    out
}

impl<'a> Decoder<'a> {
    pub fn new(cfg: &'a EncoderConfig, kind: DecoderKind) -> Self {
        Self {
            cfg,
            prefix: kind.prefix(),
        }
    }

    fn stage_name(&self, i: usize) -> String {
        format!("{}.up{i}", self.prefix)
    }

    /// Decodes `[n, embed_dim]` embeddings into NCHW images at `image_size`.
    pub fn forward<T: Real>(&self, params: &ParamSet<T>, z: &[T], n: usize) -> Result<(Vec<T>, DecoderCache<T>)> {
        if z.len() != n * self.cfg.embed_dim {
            return Err(shape_err!(
                "decoder expects {n}x{} embeddings, got {} values",
                self.cfg.embed_dim,
                z.len()
            ));
        }
        let s0 = self.cfg.decoder_seed_size();
        let chans = self.cfg.decoder_channels();
        let seed_pre = linear(params, &format!("{}.fc", self.prefix), z, n)?;
        let mut x = relu(&seed_pre);
        let mut dims = MapDims {
            batch: n,
            height: s0,
            width: s0,
            channels: chans[0],
        };
        let mut stages = Vec::with_capacity(DECODER_STAGES);
        for i in 0..DECODER_STAGES {
            let (pre, out_dims) = conv_transpose(params, &self.stage_name(i), &x, dims)?;
            let next = if i + 1 < DECODER_STAGES { relu(&pre) } else { pre.clone() };
            stages.push((std::mem::replace(&mut x, next), dims, pre));
            dims = out_dims;
        }
        Ok((
            nhwc_to_nchw(&x, dims),
            DecoderCache {
                batch: n,
                z: z.to_vec(),
                seed_pre,
                stages,
            },
        ))
    }

    /// Accumulates decoder gradients and returns `dL/dz`.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        cache: &DecoderCache<T>,
        d_images: &[T],
        grads: &mut Grads<T>,
    ) -> Result<Vec<T>> {
        let n = cache.batch;
        let size = self.cfg.image_size;
        let out_dims = MapDims {
            batch: n,
            height: size,
            width: size,
            channels: self.cfg.channels,
        };
        if d_images.len() != out_dims.len() {
            return Err(shape_err!("decoder backward: gradient has wrong size"));
        }
        let mut d = nchw_to_nhwc(d_images, out_dims);
        for i in (0..DECODER_STAGES).rev() {
            let (input, dims, pre) = &cache.stages[i];
            if i + 1 < DECODER_STAGES {
                d = relu_backward(pre, &d);
            }
            d = conv_transpose_backward(params, &self.stage_name(i), input, *dims, &d, grads, true)?
                .expect("dx requested");
        }
        let d_seed = relu_backward(&cache.seed_pre, &d);
        Ok(linear_backward(
            params,
            &format!("{}.fc", self.prefix),
            &cache.z,
            n,
            &d_seed,
            grads,
            true,
        )?
        .expect("dx requested"))
    }
}
