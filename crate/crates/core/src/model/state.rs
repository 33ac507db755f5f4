use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::decoder::{Decoder, DecoderKind};
use super::encoder::Encoder;
use super::heads::{contrast_head, domain_classifier, DinoHead};
use super::EncoderConfig;
use crate::error::{shape_err, Error, Result};
use crate::nn::init::Initializer;
use crate::nn::ParamSet;
use crate::raster::{Image, ImageBatch};

/// Which projection (if any) to apply on top of the class-token embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    None,
    Dino,
    Contrast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Student,
    Teacher,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Student => "student",
            Branch::Teacher => "teacher",
        }
    }
}

/// Every trainable array of the model plus the self-distillation center.
///
/// Parameter names carry their owner as prefix: `student.*`, `teacher.*`,
/// `domain.*`, `dec_he.*`, `dec_sim.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub center: Vec<f32>,
    pub domain: ParamSet,
    pub decoder_he: ParamSet,
    pub decoder_sim: ParamSet,
}

/// Inference batch size used by [`ModelState::encode`].
const ENCODE_CHUNK: usize = 64;

fn encoder_params(init: &mut Initializer, cfg: &EncoderConfig, prefix: &str, out: &mut ParamSet) {
    let w = cfg.width;
    let hidden = cfg.mlp_ratio * w;
    let tokens = cfg.grid() * cfg.grid() + 1;
    let p = |s: &str| format!("{prefix}.{s}");
    out.insert(p("patch_embed.weight"), init.xavier(vec![w, cfg.patch_dim()], cfg.patch_dim(), w));
    out.insert(p("patch_embed.bias"), Initializer::zeros(vec![w]));
    out.insert(p("cls_token"), init.trunc_normal(vec![w], 0.02));
    out.insert(p("pos_embed"), init.trunc_normal(vec![tokens, w], 0.02));
    for d in 0..cfg.depth {
        let b = |s: &str| p(&format!("block{d}.{s}"));
        out.insert(b("ln1.weight"), Initializer::ones(vec![w]));
        out.insert(b("ln1.bias"), Initializer::zeros(vec![w]));
        out.insert(b("attn.qkv.weight"), init.xavier(vec![3 * w, w], w, 3 * w));
        out.insert(b("attn.qkv.bias"), Initializer::zeros(vec![3 * w]));
        out.insert(b("attn.proj.weight"), init.xavier(vec![w, w], w, w));
        out.insert(b("attn.proj.bias"), Initializer::zeros(vec![w]));
        out.insert(b("ln2.weight"), Initializer::ones(vec![w]));
        out.insert(b("ln2.bias"), Initializer::zeros(vec![w]));
        out.insert(b("mlp.fc1.weight"), init.xavier(vec![hidden, w], w, hidden));
        out.insert(b("mlp.fc1.bias"), Initializer::zeros(vec![hidden]));
        out.insert(b("mlp.fc2.weight"), init.xavier(vec![w, hidden], hidden, w));
        out.insert(b("mlp.fc2.bias"), Initializer::zeros(vec![w]));
    }
    out.insert(p("norm.weight"), Initializer::ones(vec![w]));
    out.insert(p("norm.bias"), Initializer::zeros(vec![w]));
    if cfg.embed_dim != w {
        out.insert(p("embed_proj.weight"), init.trunc_normal(vec![cfg.embed_dim, w], 0.02));
        out.insert(p("embed_proj.bias"), Initializer::zeros(vec![cfg.embed_dim]));
    }
    let e = cfg.embed_dim;
    let h = cfg.dino_hidden();
    out.insert(p("dino_head.fc1.weight"), init.trunc_normal(vec![h, e], 0.02));
    out.insert(p("dino_head.fc1.bias"), Initializer::zeros(vec![h]));
    out.insert(p("dino_head.fc2.weight"), init.trunc_normal(vec![h, h], 0.02));
    out.insert(p("dino_head.fc2.bias"), Initializer::zeros(vec![h]));
    out.insert(p("dino_head.last.weight"), init.trunc_normal(vec![cfg.proj_dim_dino, h], 0.02));
}

fn decoder_params(init: &mut Initializer, cfg: &EncoderConfig, kind: DecoderKind) -> ParamSet {
    let prefix = kind.prefix();
    let chans = cfg.decoder_channels();
    let s0 = cfg.decoder_seed_size();
    let mut out = ParamSet::new();
    out.insert(
        format!("{prefix}.fc.weight"),
        init.kaiming(vec![s0 * s0 * chans[0], cfg.embed_dim], cfg.embed_dim),
    );
    out.insert(format!("{prefix}.fc.bias"), Initializer::zeros(vec![s0 * s0 * chans[0]]));
    for i in 0..chans.len() - 1 {
        // each output pixel of a stride-2, 4-tap kernel sees 2x2 taps per input channel
        let fan_in = chans[i] * 4;
        let weight = if i + 2 == chans.len() {
            init.trunc_normal(vec![chans[i], chans[i + 1], 4, 4], (1.0 / fan_in as f64).sqrt())
        } else {
            init.kaiming(vec![chans[i], chans[i + 1], 4, 4], fan_in)
        };
        out.insert(format!("{prefix}.up{i}.weight"), weight);
        out.insert(format!("{prefix}.up{i}.bias"), Initializer::zeros(vec![chans[i + 1]]));
    }
    out
}

/// Renames `from.*` parameters to `to.*`.
pub(crate) fn rename_prefix(src: &ParamSet, from: &str, to: &str) -> ParamSet {
    let mut out = ParamSet::new();
    for (k, v) in src.iter() {
        if let Some(rest) = k.strip_prefix(from) {
            out.insert(format!("{to}{rest}"), v.clone());
        }
    }
    out
}

/// Names in the student set that the teacher mirrors.
pub(crate) fn mirrored_by_teacher(name: &str) -> bool {
    !name.starts_with("student.contrast_head.")
}

/// Builds a freshly initialized model. Identical `(config, seed)` pairs give
/// bit-identical states.
pub fn init_model(config: &EncoderConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut init = Initializer::new(seed);
    let mut student = ParamSet::new();
    encoder_params(&mut init, config, "student", &mut student);
    let e = config.embed_dim;
    let h = config.dino_hidden();
    student.insert("student.contrast_head.fc1.weight", init.trunc_normal(vec![h, e], 0.02));
    student.insert("student.contrast_head.fc1.bias", Initializer::zeros(vec![h]));
    student.insert(
        "student.contrast_head.fc2.weight",
        init.trunc_normal(vec![config.proj_dim_contrast, h], 0.02),
    );
    student.insert(
        "student.contrast_head.fc2.bias",
        Initializer::zeros(vec![config.proj_dim_contrast]),
    );

    let mut domain = ParamSet::new();
    domain.insert(
        "domain.fc1.weight",
        init.kaiming(vec![config.domain_hidden, e], e),
    );
    domain.insert("domain.fc1.bias", Initializer::zeros(vec![config.domain_hidden]));
    domain.insert("domain.fc2.weight", init.trunc_normal(vec![2, config.domain_hidden], 0.02));
    domain.insert("domain.fc2.bias", Initializer::zeros(vec![2]));

    let decoder_he = decoder_params(&mut init, config, DecoderKind::He);
    let decoder_sim = decoder_params(&mut init, config, DecoderKind::Sim);

    let mirrored = student.iter().filter(|(k, _)| mirrored_by_teacher(k));
    let mut teacher_src = ParamSet::new();
    for (k, v) in mirrored {
        teacher_src.insert(k.clone(), v.clone());
    }
    let teacher = rename_prefix(&teacher_src, "student.", "teacher.");

    Ok(ModelState {
        config: config.clone(),
        student,
        teacher,
        center: vec![0.0; config.proj_dim_dino],
        domain,
        decoder_he,
        decoder_sim,
    })
}

impl ModelState {
    fn branch_params(&self, branch: Branch) -> &ParamSet {
        match branch {
            Branch::Student => &self.student,
            Branch::Teacher => &self.teacher,
        }
    }

    /// Class-token embeddings (`head = None`) or head outputs, one row per image.
    pub fn encode(&self, images: &ImageBatch, branch: Branch, head: Head) -> Result<Array2<f32>> {
        let cfg = &self.config;
        if images.channels() != cfg.channels {
            return Err(shape_err!(
                "encoder expects {} channels, batch has {}",
                cfg.channels,
                images.channels()
            ));
        }
        if branch == Branch::Teacher && head == Head::Contrast {
            return Err(Error::Input("the teacher has no contrastive head".into()));
        }
        let params = self.branch_params(branch);
        let prefix = branch.prefix();
        let encoder = Encoder::new(params, cfg, prefix);
        let size = images.size();
        let per_image = cfg.channels * size * size;
        let out_dim = match head {
            Head::None => cfg.embed_dim,
            Head::Dino => cfg.proj_dim_dino,
            Head::Contrast => cfg.proj_dim_contrast,
        };
        let mut out = Vec::with_capacity(images.len() * out_dim);
        let dino = DinoHead::new(prefix);
        let contrast = contrast_head(prefix);
        for chunk in images.data().chunks(ENCODE_CHUNK * per_image) {
            let n = chunk.len() / per_image;
            let (z, _) = encoder.forward(chunk, n, size)?;
            let rows = match head {
                Head::None => z,
                Head::Dino => dino.forward(params, &z, n)?.0,
                Head::Contrast => contrast.forward(params, &z, n)?.0,
            };
            out.extend(rows);
        }
        Array2::from_shape_vec((images.len(), out_dim), out).map_err(|e| shape_err!("{e}"))
    }

    /// Two-class domain logits for a batch of class-token embeddings.
    pub fn domain_classify(&self, z: &Array2<f32>) -> Result<Array2<f32>> {
        if z.ncols() != self.config.embed_dim {
            return Err(shape_err!(
                "domain classifier expects {} columns, got {}",
                self.config.embed_dim,
                z.ncols()
            ));
        }
        let flat: Vec<f32> = z.iter().copied().collect();
        let (logits, _) = domain_classifier().forward(&self.domain, &flat, z.nrows())?;
        Array2::from_shape_vec((z.nrows(), 2), logits).map_err(|e| shape_err!("{e}"))
    }

    /// Decodes embeddings into images with the chosen modality decoder.
    pub fn decode(&self, z: &Array2<f32>, which: DecoderKind) -> Result<Vec<Image>> {
        let cfg = &self.config;
        if z.ncols() != cfg.embed_dim {
            return Err(shape_err!(
                "decoder expects {} columns, got {}",
                cfg.embed_dim,
                z.ncols()
            ));
        }
        let params = match which {
            DecoderKind::He => &self.decoder_he,
            DecoderKind::Sim => &self.decoder_sim,
        };
        let flat: Vec<f32> = z.iter().copied().collect();
        let (pixels, _) = Decoder::new(cfg, which).forward(params, &flat, z.nrows())?;
        let per = cfg.channels * cfg.image_size * cfg.image_size;
        pixels
            .chunks_exact(per)
            .map(|c| Image::new(cfg.channels, cfg.image_size, cfg.image_size, c.to_vec()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.student.all_finite()
            && self.teacher.all_finite()
            && self.center.iter().all(|v| v.is_finite())
            && self.domain.all_finite()
            && self.decoder_he.all_finite()
            && self.decoder_sim.all_finite()
    }
}
