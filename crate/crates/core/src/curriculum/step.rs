//! One optimization step: sampling, view generation, the forward passes,
//! every active loss and the backward pass into a single gradient map.

use ndarray::{Array2, ArrayView1};
use rand::seq::index;
use rand::Rng;

use super::config::{CurriculumConfig, DataMode, StageSpec};
use crate::error::{input_err, shape_err, Error, Result};
use crate::model::heads::{contrast_head, domain_classifier, DinoHead};
use crate::model::{Decoder, DecoderKind, Encoder, EncoderConfig};
use crate::modality::Modality;
use crate::nn::grl::{grl, grl_backward};
use crate::nn::{Grads, GrlCoefficient, ParamSet, Real};
use crate::objectives::{
    cross_recon_loss_grad, dino_loss_grad, domain_loss_grad, paired_contrastive_loss_grad, total_loss,
    LossComponents, LossWeights, Temperatures,
};
use crate::raster::{Image, ImageBatch};
use crate::views::{batch_standardize, make_views, ViewConfig};

/// Registered image pairs held in memory; `he[i]` and `sim[i]` show the
/// same tissue.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub ids: Vec<String>,
    pub he: Vec<Image>,
    pub sim: Vec<Image>,
}

impl TrainingData {
    pub fn new(ids: Vec<String>, he: Vec<Image>, sim: Vec<Image>) -> Result<Self> {
        if ids.len() != he.len() || he.len() != sim.len() {
            return Err(input_err!(
                "{} ids, {} H&E images and {} SIM images do not line up",
                ids.len(),
                he.len(),
                sim.len()
            ));
        }
        if ids.is_empty() {
            return Err(input_err!("training data is empty"));
        }
        Ok(Self { ids, he, sim })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn images(&self, modality: Modality) -> &[Image] {
        match modality {
            Modality::He => &self.he,
            Modality::Sim => &self.sim,
        }
    }
}

/// Augmented views of one modality's share of the batch, sample-major:
/// rows `b·M .. (b+1)·M` of `globals` belong to sample `b`.
pub struct ModalityViews {
    pub modality: Modality,
    pub samples: usize,
    pub globals: ImageBatch,
    pub locals: Option<ImageBatch>,
}

pub struct StepInputs {
    pub views: Vec<ModalityViews>,
    /// Un-augmented registered pairs for the paired losses.
    pub clean: Option<(Vec<Image>, Vec<Image>)>,
}

fn draw_indices<R: Rng + ?Sized>(rng: &mut R, len: usize, count: usize) -> Vec<usize> {
    if count <= len {
        index::sample(rng, len, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Samples a batch and builds its views.
pub fn prepare_step<R: Rng + ?Sized>(
    data: &TrainingData,
    spec: &StageSpec,
    batch_size: usize,
    views: &ViewConfig,
    rng: &mut R,
) -> Result<StepInputs> {
    let paired_idx = match spec.data_mode {
        DataMode::Paired => Some(draw_indices(rng, data.len(), batch_size)),
        DataMode::Unpaired => None,
    };
    let mut out = Vec::with_capacity(spec.modalities.len());
    for &modality in &spec.modalities {
        let idx = match &paired_idx {
            Some(i) => i.clone(),
            None => draw_indices(rng, data.len(), batch_size),
        };
        let sources: Vec<Image> = idx.iter().map(|&i| data.images(modality)[i].clone()).collect();
        let standardized = batch_standardize(&sources, rng, views.standardize_prob)?;
        let mut globals = Vec::with_capacity(batch_size * views.m_global);
        let mut locals = Vec::with_capacity(batch_size * views.n_local);
        for (img, &i) in standardized.iter().zip(&idx) {
            let v = make_views(img, data.ids[i].as_str(), modality, views, rng)?;
            globals.extend(v.globals);
            locals.extend(v.locals);
        }
        out.push(ModalityViews {
            modality,
            samples: idx.len(),
            globals: ImageBatch::stack(&globals)?,
            locals: if locals.is_empty() {
                None
            } else {
                Some(ImageBatch::stack(&locals)?)
            },
        });
    }
    let clean = paired_idx.map(|idx| {
        (
            idx.iter().map(|&i| data.he[i].clone()).collect(),
            idx.iter().map(|&i| data.sim[i].clone()).collect(),
        )
    });
    Ok(StepInputs { views: out, clean })
}

/// Read-only parameter views used by [`loss_and_grads`].
pub struct ModelView<'a, T: Real> {
    pub config: &'a EncoderConfig,
    pub student: &'a ParamSet<T>,
    pub teacher: &'a ParamSet<T>,
    pub domain: &'a ParamSet<T>,
    pub decoder_he: &'a ParamSet<T>,
    pub decoder_sim: &'a ParamSet<T>,
}

pub struct StepOutput<T> {
    pub components: LossComponents,
    pub total: f64,
    pub grads: Grads<T>,
    /// Every teacher logit row of the step, for the center update.
    pub teacher_logits: Option<Array2<f64>>,
}

/// Settings shared by every step of a stage.
pub struct StepSettings<'a> {
    pub weights: LossWeights,
    pub temps: &'a Temperatures,
    pub m_global: usize,
    pub n_local: usize,
    pub grl: GrlCoefficient,
}

impl<'a> StepSettings<'a> {
    pub fn new(config: &'a CurriculumConfig, spec: &StageSpec, grl: GrlCoefficient) -> Self {
        Self {
            weights: spec.weights,
            temps: &config.temps,
            m_global: config.views.m_global,
            n_local: config.views.n_local,
            grl,
        }
    }
}

fn to_f64<T: Real>(v: &[T], cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((v.len() / cols, cols), v.iter().map(|x| x.as_f64()).collect())
        .expect("whole rows")
}

fn from_f64<T: Real>(a: &Array2<f64>, scale: f64) -> Vec<T> {
    a.iter().map(|&x| T::lit(x * scale)).collect()
}

fn pixels(images: &[Image]) -> Vec<f64> {
    images.iter().flat_map(|i| i.data().iter().map(|&v| v as f64)).collect()
}

struct Forward<T: Real> {
    z_g: Vec<T>,
    cache_g: crate::model::encoder::EncoderCache<T>,
    local: Option<(crate::model::encoder::EncoderCache<T>, usize)>,
    head_g: Option<(Vec<T>, crate::model::heads::DinoHeadCache<T>)>,
    head_l: Option<(Vec<T>, crate::model::heads::DinoHeadCache<T>)>,
    teacher: Option<Array2<f64>>,
    d_z_g: Vec<T>,
    d_logits_g: Vec<T>,
    d_logits_l: Vec<T>,
}

/// Computes the active losses of one step and their gradients with respect
/// to student, domain-classifier and decoder parameters. Teacher parameters
/// and the center never receive gradients.
pub fn loss_and_grads<T: Real>(
    model: &ModelView<'_, T>,
    center: ArrayView1<f64>,
    inputs: &StepInputs,
    settings: &StepSettings<'_>,
) -> Result<StepOutput<T>> {
    let cfg = model.config;
    let w = settings.weights;
    let (m, n_loc) = (settings.m_global, settings.n_local);
    let e = cfg.embed_dim;
    let k = cfg.proj_dim_dino;
    let student = Encoder::new(model.student, cfg, "student");
    let teacher = Encoder::new(model.teacher, cfg, "teacher");
    let s_head = DinoHead::new("student");
    let t_head = DinoHead::new("teacher");
    let use_dino = w.lambda1 > 0.0;
    let use_domain = w.lambda2 > 0.0;
    let use_pairs = w.lambda3 > 0.0 || w.lambda4 > 0.0;

    let mut grads = Grads::new();
    let mut comps = LossComponents::default();

    let mut fwd: Vec<Forward<T>> = Vec::new();
    if use_dino || use_domain {
        for mv in &inputs.views {
            let b = mv.samples;
            let size = mv.globals.size();
            let (z_g, cache_g) = student.forward(mv.globals.data(), b * m, size)?;
            let mut f = Forward {
                d_z_g: vec![T::zero(); z_g.len()],
                z_g,
                cache_g,
                local: None,
                head_g: None,
                head_l: None,
                teacher: None,
                d_logits_g: Vec::new(),
                d_logits_l: Vec::new(),
            };
            if use_dino {
                f.head_g = Some(s_head.forward(model.student, &f.z_g, b * m)?);
                if let Some(locals) = &mv.locals {
                    let (z_l, cache_l) = student.forward(locals.data(), b * n_loc, locals.size())?;
                    f.head_l = Some(s_head.forward(model.student, &z_l, b * n_loc)?);
                    f.local = Some((cache_l, b * n_loc));
                }
                let (tz, _) = teacher.forward(mv.globals.data(), b * m, size)?;
                let (tl, _) = t_head.forward(model.teacher, &tz, b * m)?;
                f.teacher = Some(to_f64(&tl, k));
            }
            fwd.push(f);
        }
    }

    let mut teacher_rows = None;
    if use_dino {
        let total_samples: usize = inputs.views.iter().map(|v| v.samples).sum();
        let scale = w.lambda1 / total_samples as f64;
        let mut loss = 0.0;
        for (f, mv) in fwd.iter_mut().zip(&inputs.views) {
            let t_all = f.teacher.as_ref().expect("teacher ran");
            let s_g = to_f64(&f.head_g.as_ref().expect("head ran").0, k);
            let s_l = f.head_l.as_ref().map(|(l, _)| to_f64(l, k));
            f.d_logits_g = vec![T::zero(); s_g.len()];
            f.d_logits_l = vec![T::zero(); s_l.as_ref().map_or(0, |a| a.len())];
            for b in 0..mv.samples {
                let t = t_all.slice(ndarray::s![b * m..(b + 1) * m, ..]);
                let mut s = s_g.slice(ndarray::s![b * m..(b + 1) * m, ..]).to_owned();
                if let Some(l) = &s_l {
                    let rows = l.slice(ndarray::s![b * n_loc..(b + 1) * n_loc, ..]);
                    s = ndarray::concatenate(ndarray::Axis(0), &[s.view(), rows])
                        .map_err(|e| shape_err!("{e}"))?;
                }
                let (l, g) = dino_loss_grad(t, s.view(), center, settings.temps)?;
                loss += l;
                for (r, row) in g.outer_iter().enumerate() {
                    let dst = if r < m {
                        &mut f.d_logits_g[(b * m + r) * k..][..k]
                    } else {
                        &mut f.d_logits_l[(b * n_loc + r - m) * k..][..k]
                    };
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d = T::lit(v * scale);
                    }
                }
            }
        }
        comps.dino = loss / total_samples as f64;
        let rows: Vec<_> = fwd.iter().map(|f| f.teacher.as_ref().expect("teacher ran").view()).collect();
        teacher_rows = Some(ndarray::concatenate(ndarray::Axis(0), &rows).map_err(|e| shape_err!("{e}"))?);
    }

    if use_domain {
        if fwd.len() < 2 {
            return Err(Error::Config("the domain loss needs both modalities in the batch".into()));
        }
        let mut z_all = Vec::new();
        let mut labels = Vec::new();
        for (f, mv) in fwd.iter().zip(&inputs.views) {
            z_all.extend_from_slice(&grl(&f.z_g, settings.grl));
            labels.extend(std::iter::repeat(mv.modality.label()).take(mv.samples * m));
        }
        let rows = labels.len();
        let clf = domain_classifier();
        let (logits, cache) = clf.forward(model.domain, &z_all, rows)?;
        let (l, g) = domain_loss_grad(to_f64(&logits, 2).view(), &labels)?;
        comps.domain = l;
        let d_logits: Vec<T> = from_f64(&g, w.lambda2);
        let dz = clf
            .backward(model.domain, &cache, &d_logits, &mut grads, true)?
            .expect("dx requested");
        let dz = grl_backward(&dz, settings.grl);
        let mut offset = 0;
        for f in fwd.iter_mut() {
            let len = f.d_z_g.len();
            for (acc, &v) in f.d_z_g.iter_mut().zip(&dz[offset..offset + len]) {
                *acc += v;
            }
            offset += len;
        }
    }

    for f in fwd.iter_mut() {
        if let Some((_, hc)) = &f.head_g {
            let dz = s_head.backward(model.student, hc, &f.d_logits_g, &mut grads)?;
            for (acc, v) in f.d_z_g.iter_mut().zip(dz) {
                *acc += v;
            }
        }
        student.backward(&f.cache_g, &f.d_z_g, &mut grads)?;
        if let (Some((_, hc)), Some((cache_l, _))) = (&f.head_l, &f.local) {
            let dz = s_head.backward(model.student, hc, &f.d_logits_l, &mut grads)?;
            student.backward(cache_l, &dz, &mut grads)?;
        }
    }
    drop(fwd);

    if use_pairs {
        let (he, sim) = inputs
            .clean
            .as_ref()
            .ok_or_else(|| Error::Config("paired losses need paired batches".into()))?;
        let b = he.len();
        let both = ImageBatch::stack(he.iter().chain(sim.iter()))?;
        let (z, cache) = student.forward(both.data(), 2 * b, both.size())?;
        let mut dz = vec![T::zero(); z.len()];
        if w.lambda3 > 0.0 {
            let head = contrast_head("student");
            let (c, hc) = head.forward(model.student, &z, 2 * b)?;
            let p = cfg.proj_dim_contrast;
            let c = to_f64(&c, p);
            let (l, g_he, g_sim) = paired_contrastive_loss_grad(
                c.slice(ndarray::s![..b, ..]),
                c.slice(ndarray::s![b.., ..]),
                settings.temps.tau_contrast,
            )?;
            comps.contrast = l;
            let mut dc: Vec<T> = from_f64(&g_he, w.lambda3);
            dc.extend(from_f64::<T>(&g_sim, w.lambda3));
            let d = head
                .backward(model.student, &hc, &dc, &mut grads, true)?
                .expect("dx requested");
            for (acc, v) in dz.iter_mut().zip(d) {
                *acc += v;
            }
        }
        if w.lambda4 > 0.0 {
            let (z_he, z_sim) = z.split_at(b * e);
            let dec_he = Decoder::new(cfg, DecoderKind::He);
            let dec_sim = Decoder::new(cfg, DecoderKind::Sim);
            let (he_from_sim, c_he) = dec_he.forward(model.decoder_he, z_sim, b)?;
            let (sim_from_he, c_sim) = dec_sim.forward(model.decoder_sim, z_he, b)?;
            let to64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
            let (l, g_he, g_sim) =
                cross_recon_loss_grad(&to64(&he_from_sim), &pixels(he), &to64(&sim_from_he), &pixels(sim))?;
            comps.recon = l;
            let scale = |g: Vec<f64>| g.into_iter().map(|x| T::lit(x * w.lambda4)).collect::<Vec<T>>();
            let dz_sim = dec_he.backward(model.decoder_he, &c_he, &scale(g_he), &mut grads)?;
            let dz_he = dec_sim.backward(model.decoder_sim, &c_sim, &scale(g_sim), &mut grads)?;
            for (acc, v) in dz[..b * e].iter_mut().zip(dz_he) {
                *acc += v;
            }
            for (acc, v) in dz[b * e..].iter_mut().zip(dz_sim) {
                *acc += v;
            }
        }
        student.backward(&cache, &dz, &mut grads)?;
    }

    Ok(StepOutput {
        total: total_loss(&comps, &w),
        components: comps,
        grads,
        teacher_logits: teacher_rows,
    })
}
