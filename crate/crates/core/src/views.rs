//! Multi-crop view generation and cross-image moment matching.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::modality::Modality;
use crate::raster::{Image, Rect};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub m_global: usize,
    pub n_local: usize,
    pub global_size: usize,
    pub local_size: usize,
    /// Crop area as a fraction of the source, `[min, max]`.
    pub global_scale: [f64; 2],
    pub local_scale: [f64; 2],
    /// Multiplicative brightness jitter: factor drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Contrast jitter about the image mean: factor drawn from `1 ± contrast`.
    pub contrast: f64,
    pub flip_prob: f64,
    pub standardize_prob: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            m_global: 2,
            n_local: 4,
            global_size: 64,
            local_size: 32,
            global_scale: [0.5, 1.0],
            local_scale: [0.15, 0.5],
            brightness: 0.2,
            contrast: 0.2,
            flip_prob: 0.5,
            standardize_prob: 0.5,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m_global < 2 {
            return bad(format!("m_global must be >= 2, got {}", self.m_global));
        }
        if self.global_size == 0 || self.local_size == 0 {
            return bad("view sizes must be >= 1".into());
        }
        for (name, [lo, hi]) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} must satisfy 0 < min <= max <= 1, got [{lo}, {hi}]"));
            }
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("standardize_prob", self.standardize_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0,1], got {p}"));
            }
        }
        for (name, j) in [("brightness", self.brightness), ("contrast", self.contrast)] {
            if !(0.0..1.0).contains(&j) {
                return bad(format!("{name} jitter must lie in [0,1), got {j}"));
            }
        }
        Ok(())
    }

    pub fn views_per_sample(&self) -> usize {
        self.m_global + self.n_local
    }
}

/// Where a view came from: the crop rectangle in source pixels and whether
/// it was mirrored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crop {
    pub rect: Rect,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub globals: Vec<Image>,
    pub locals: Vec<Image>,
    pub global_crops: Vec<Crop>,
    pub local_crops: Vec<Crop>,
    pub source_id: String,
    pub modality: Modality,
}

const ASPECT_RANGE: [f64; 2] = [3.0 / 4.0, 4.0 / 3.0];
const CROP_ATTEMPTS: usize = 10;

fn sample_crop<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, scale: [f64; 2]) -> Rect {
    let (w_src, h_src) = (width as f64, height as f64);
    let area = w_src * h_src;
    for _ in 0..CROP_ATTEMPTS {
        let s = if scale[0] < scale[1] {
            rng.random_range(scale[0]..=scale[1])
        } else {
            scale[0]
        };
        let log_r = rng.random_range(ASPECT_RANGE[0].ln()..=ASPECT_RANGE[1].ln());
        let r = log_r.exp();
        let w = (s * area * r).sqrt();
        let h = (s * area / r).sqrt();
        if w <= w_src && h <= h_src {
            let x = rng.random_range(0.0..=w_src - w);
            let y = rng.random_range(0.0..=h_src - h);
            return Rect { x, y, w, h };
        }
    }
    Rect::full(width, height)
}

fn jitter<R: Rng + ?Sized>(img: &mut Image, cfg: &ViewConfig, modality: Modality, rng: &mut R) {
    if cfg.brightness == 0.0 && cfg.contrast == 0.0 {
        return;
    }
    let mut draw = |strength: f64| {
        if strength > 0.0 {
            rng.random_range(1.0 - strength..=1.0 + strength) as f32
        } else {
            1.0
        }
    };
    let channels = img.channels();
    // SIM stays grayscale: one factor pair for every channel
    let factors: Vec<(f32, f32)> = match modality {
        Modality::Sim => {
            let f = (draw(cfg.brightness), draw(cfg.contrast));
            vec![f; channels]
        }
        Modality::He => (0..channels).map(|_| (draw(cfg.brightness), draw(cfg.contrast))).collect(),
    };
    for (c, (b, k)) in factors.into_iter().enumerate() {
        let plane = img.plane_mut(c);
        let mean = plane.iter().sum::<f32>() / plane.len() as f32;
        for v in plane.iter_mut() {
            *v = (((*v - mean) * k + mean) * b).clamp(0.0, 1.0);
        }
    }
}

fn make_view<R: Rng + ?Sized>(
    image: &Image,
    size: usize,
    scale: [f64; 2],
    cfg: &ViewConfig,
    modality: Modality,
    rng: &mut R,
) -> (Image, Crop) {
    let rect = sample_crop(rng, image.width(), image.height(), scale);
    let flipped = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob);
    let mut view = image.resample(rect, size, size, flipped);
    jitter(&mut view, cfg, modality, rng);
    (view, Crop { rect, flipped })
}

/// Draws `m_global` global and `n_local` local augmented views of one image.
pub fn make_views<R: Rng + ?Sized>(
    image: &Image,
    source_id: impl Into<String>,
    modality: Modality,
    cfg: &ViewConfig,
    rng: &mut R,
) -> Result<ViewBatch> {
    cfg.validate()?;
    let min_side = image.width().min(image.height());
    if min_side < cfg.global_size {
        return Err(input_err!(
            "source is {}x{}, smaller than the {}px global view",
            image.height(),
            image.width(),
            cfg.global_size
        ));
    }
    let mut out = ViewBatch {
        globals: Vec::with_capacity(cfg.m_global),
        locals: Vec::with_capacity(cfg.n_local),
        global_crops: Vec::with_capacity(cfg.m_global),
        local_crops: Vec::with_capacity(cfg.n_local),
        source_id: source_id.into(),
        modality,
    };
    for _ in 0..cfg.m_global {
        let (v, c) = make_view(image, cfg.global_size, cfg.global_scale, cfg, modality, rng);
        out.globals.push(v);
        out.global_crops.push(c);
    }
    for _ in 0..cfg.n_local {
        let (v, c) = make_view(image, cfg.local_size, cfg.local_scale, cfg, modality, rng);
        out.locals.push(v);
        out.local_crops.push(c);
    }
    Ok(out)
}

/// Channels with a standard deviation below this are treated as constant.
pub const DEGENERATE_STD: f64 = 1e-6;

/// Re-standardizes each image, with probability `prob`, to the per-channel
/// mean and std of another image drawn uniformly from the rest of the batch.
pub fn batch_standardize<R: Rng + ?Sized>(images: &[Image], rng: &mut R, prob: f64) -> Result<Vec<Image>> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Config(format!("standardize probability must lie in [0,1], got {prob}")));
    }
    if prob == 0.0 {
        return Ok(images.to_vec());
    }
    if images.len() < 2 {
        log::warn!("batch standardization needs at least 2 images; passing through");
        return Ok(images.to_vec());
    }
    let moments: Vec<Vec<(f64, f64)>> = images.iter().map(Image::channel_moments).collect();
    let mut out = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        if !rng.random_bool(prob) {
            out.push(img.clone());
            continue;
        }
        let mut r = rng.random_range(0..images.len() - 1);
        if r >= i {
            r += 1;
        }
        if images[r].channels() != img.channels() {
            return Err(input_err!("batch mixes channel counts"));
        }
        let mut x = img.clone();
        for c in 0..x.channels() {
            let (mu_x, sd_x) = moments[i][c];
            let (mu_r, sd_r) = moments[r][c];
            for v in x.plane_mut(c) {
                *v = if sd_x < DEGENERATE_STD {
                    mu_r as f32
                } else {
                    ((*v as f64 - mu_x) / sd_x * sd_r + mu_r) as f32
                };
            }
        }
        out.push(x);
    }
    Ok(out)
}
