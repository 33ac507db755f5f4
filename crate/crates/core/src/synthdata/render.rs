use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::latent::{pixel_span, MorphologyLatent};
use crate::modality::Modality;
use crate::raster::Image;

const HE_STROMA: [f64; 3] = [0.93, 0.70, 0.80];
const HE_NUCLEUS: [f64; 3] = [0.36, 0.20, 0.52];
const HE_LUMEN: [f64; 3] = [0.97, 0.94, 0.96];
const HE_NOISE: f64 = 0.015;
const HE_STAIN_JITTER: f64 = 0.04;

const SIM_BACKGROUND: f64 = 0.035;
const SIM_STROMA: f64 = 0.07;
const SIM_NUCLEUS: f64 = 0.85;
const SIM_SPECKLE: f64 = 0.10;
const SIM_READ_NOISE: f64 = 0.01;
const SIM_VIGNETTE: f64 = 0.3;

/// Per-pixel index of the nucleus covering it (the last one drawn wins).
fn nucleus_index(latent: &MorphologyLatent) -> Vec<Option<usize>> {
    let s = latent.size;
    let mut idx = vec![None; s * s];
    for (k, n) in latent.nuclei.iter().enumerate() {
        let (x0, x1) = pixel_span(n.center.0, n.radius, s);
        let (y0, y1) = pixel_span(n.center.1, n.radius, s);
        for y in y0..y1 {
            for x in x0..x1 {
                if n.covers(x, y) {
                    idx[y * s + x] = Some(k);
                }
            }
        }
    }
    idx
}

/// Renders a latent in one modality. Values are in `[0,1]`, three channels
/// (SIM is grayscale replicated). Noise comes from `rng` only, so the two
/// modalities of one latent use independent draws when given separate
/// generators.
pub fn render<R: Rng + ?Sized>(latent: &MorphologyLatent, modality: Modality, rng: &mut R) -> Image {
    match modality {
        Modality::He => render_he(latent, rng),
        Modality::Sim => render_sim(latent, rng),
    }
}

fn render_he<R: Rng + ?Sized>(latent: &MorphologyLatent, rng: &mut R) -> Image {
    let s = latent.size;
    let owner = nucleus_index(latent);
    let noise = Normal::new(0.0, HE_NOISE).expect("valid sigma");
    let stain: Vec<f64> = (0..3)
        .map(|_| 1.0 + rng.random_range(-HE_STAIN_JITTER..=HE_STAIN_JITTER))
        .collect();
    let mut img = Image::zeros(3, s, s);
    let plane = s * s;
    let data = img.data_mut();
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let base = match owner[i] {
                Some(k) => {
                    let d = latent.nuclei[k].density;
                    // denser chromatin stains darker
                    HE_NUCLEUS.map(|c| c * (1.6 - 0.6 * d))
                }
                None if latent.lumen.is_some_and(|l| l.covers(x, y)) => HE_LUMEN,
                None => {
                    let f = latent.stroma_field.at((x as f64 + 0.5) / s as f64, (y as f64 + 0.5) / s as f64);
                    HE_STROMA.map(|c| c * (0.92 + 0.08 * f))
                }
            };
            for c in 0..3 {
                let v = base[c] * stain[c] + noise.sample(rng);
                data[c * plane + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

fn render_sim<R: Rng + ?Sized>(latent: &MorphologyLatent, rng: &mut R) -> Image {
    let s = latent.size;
    let owner = nucleus_index(latent);
    let speckle = Normal::new(1.0, SIM_SPECKLE).expect("valid sigma");
    let read = Normal::new(0.0, SIM_READ_NOISE).expect("valid sigma");
    let half = s as f64 / 2.0;
    let r_max2 = 2.0 * half * half;
    let mut gray = vec![0.0f32; s * s];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let signal = match owner[i] {
                Some(k) => SIM_NUCLEUS * latent.nuclei[k].density,
                None if latent.lumen.is_some_and(|l| l.covers(x, y)) => SIM_BACKGROUND * 0.5,
                None => {
                    let f = latent.stroma_field.at((x as f64 + 0.5) / s as f64, (y as f64 + 0.5) / s as f64);
                    SIM_BACKGROUND + SIM_STROMA * f
                }
            };
            let (dx, dy) = (x as f64 + 0.5 - half, y as f64 + 0.5 - half);
            let vignette = 1.0 - SIM_VIGNETTE * (dx * dx + dy * dy) / r_max2;
            let v = signal * speckle.sample(rng).max(0.0) * vignette + read.sample(rng);
            gray[i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    let mut data = Vec::with_capacity(3 * s * s);
    for _ in 0..3 {
        data.extend_from_slice(&gray);
    }
    Image::new(3, s, s, data).expect("sized buffer")
}

/// Otsu threshold over a 256-bin histogram of values in `[0,1]`.
pub fn otsu_threshold(values: &[f32]) -> f32 {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[((v.clamp(0.0, 1.0) * 255.0).round()) as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &h) in hist.iter().enumerate() {
        w0 += h as f64;
        sum0 += t as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    // pixels in bins <= best_t form the lower class
    (best_t as f32 + 0.5) / 255.0
}

/// Binarized nuclei mask of a render: mean intensity thresholded at the Otsu
/// level. Nuclei are the dark class in H&E and the bright class in SIM.
pub fn otsu_nuclei_mask(image: &Image, modality: Modality) -> Vec<bool> {
    let plane = image.height() * image.width();
    let c = image.channels() as f32;
    let gray: Vec<f32> = (0..plane)
        .map(|i| (0..image.channels()).map(|ch| image.plane(ch)[i]).sum::<f32>() / c)
        .collect();
    let t = otsu_threshold(&gray);
    gray.iter()
        .map(|&v| match modality {
            Modality::He => v < t,
            Modality::Sim => v > t,
        })
        .collect()
}

/// Intersection over union of two masks; two empty masks count as identical.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
