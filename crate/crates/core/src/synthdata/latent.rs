use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth morphology class of a synthetic patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphologyClass {
    SparseStroma,
    DenseNuclei,
    Glandular,
}

impl MorphologyClass {
    pub const ALL: [MorphologyClass; 3] = [Self::SparseStroma, Self::DenseNuclei, Self::Glandular];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown morphology class id {id}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SparseStroma => "sparse_stroma",
            Self::DenseNuclei => "dense_nuclei",
            Self::Glandular => "glandular",
        }
    }

    /// Inclusive nuclei-count range for a 64-px patch. The ranges are disjoint.
    pub fn nuclei_range(self) -> (usize, usize) {
        match self {
            Self::SparseStroma => (3, 12),
            Self::Glandular => (16, 30),
            Self::DenseNuclei => (40, 80),
        }
    }

    /// Nuclei-count range scaled by area for a patch of side `size`.
    pub fn nuclei_range_for(self, size: usize) -> (usize, usize) {
        let (lo, hi) = self.nuclei_range();
        let area = (size * size) as f64 / (REFERENCE_SIZE * REFERENCE_SIZE) as f64;
        let lo = ((lo as f64 * area).round() as usize).max(1);
        let hi = ((hi as f64 * area).round() as usize).max(lo);
        (lo, hi)
    }

    fn radius_range(self) -> (f64, f64) {
        match self {
            Self::SparseStroma => (2.6, 4.0),
            Self::Glandular => (2.2, 3.2),
            Self::DenseNuclei => (2.0, 3.0),
        }
    }

    fn eccentricity_range(self) -> (f64, f64) {
        match self {
            Self::SparseStroma => (0.6, 0.9),
            Self::Glandular => (0.3, 0.7),
            Self::DenseNuclei => (0.0, 0.5),
        }
    }
}

impl fmt::Display for MorphologyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MorphologyClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown morphology class {s:?}")))
    }
}

/// Side length the class statistics are declared for.
pub const REFERENCE_SIZE: usize = 64;

/// An elliptical nucleus. `radius` is the semi-major axis; the minor axis is
/// `radius·sqrt(1 − eccentricity²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nucleus {
    pub center: (f64, f64),
    pub radius: f64,
    pub eccentricity: f64,
    pub angle: f64,
    /// Relative chromatin density, scales stain and fluorescence.
    pub density: f64,
}

impl Nucleus {
    pub fn minor_radius(&self) -> f64 {
        self.radius * (1.0 - self.eccentricity * self.eccentricity).sqrt()
    }

    /// Whether the pixel center `(x + 0.5, y + 0.5)` lies inside the ellipse.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.center.0;
        let dy = y as f64 + 0.5 - self.center.1;
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let (a, b) = (self.radius, self.minor_radius());
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }
}

/// Low-frequency value noise: a `cells × cells` lattice of random values,
/// smoothly interpolated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StromaField {
    pub cells: usize,
    pub amplitude: f64,
    pub lattice: Vec<f64>,
}

impl StromaField {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let cells = rng.random_range(3..=6usize);
        let amplitude = rng.random_range(0.5..1.0);
        let lattice = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
        Self {
            cells,
            amplitude,
            lattice,
        }
    }

    /// Field value in `[0,1]` at normalized coordinates `u, v ∈ [0,1]`.
    pub fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells;
        let fx = (u.clamp(0.0, 1.0) * n as f64).min(n as f64 - 1e-9);
        let fy = (v.clamp(0.0, 1.0) * n as f64).min(n as f64 - 1e-9);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let l = |x: usize, y: usize| self.lattice[y * (n + 1) + x];
        let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
        let bottom = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
        let raw = top * (1.0 - ty) + bottom * ty;
        0.5 + (raw - 0.5) * self.amplitude
    }
}

/// A gland lumen: a clear disc with nuclei arranged around its rim.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lumen {
    pub center: (f64, f64),
    pub radius: f64,
}

impl Lumen {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.center.0;
        let dy = y as f64 + 0.5 - self.center.1;
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Modality-independent description of one tissue patch. Both renders of a
/// latent share its nuclei geometry exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphologyLatent {
    pub size: usize,
    pub class: MorphologyClass,
    pub nuclei: Vec<Nucleus>,
    pub lumen: Option<Lumen>,
    pub stroma_field: StromaField,
}

impl MorphologyLatent {
    /// Ground-truth nuclei mask, row-major.
    pub fn nuclei_mask(&self) -> Vec<bool> {
        let s = self.size;
        let mut mask = vec![false; s * s];
        for n in &self.nuclei {
            let (x0, x1) = pixel_span(n.center.0, n.radius, s);
            let (y0, y1) = pixel_span(n.center.1, n.radius, s);
            for y in y0..y1 {
                for x in x0..x1 {
                    if n.covers(x, y) {
                        mask[y * s + x] = true;
                    }
                }
            }
        }
        mask
    }
}

/// Pixel index range that can intersect a disc of radius `r` around `c`.
pub(crate) fn pixel_span(c: f64, r: f64, size: usize) -> (usize, usize) {
    let lo = (c - r - 1.0).floor().max(0.0) as usize;
    let hi = ((c + r + 1.0).ceil().max(0.0) as usize).min(size);
    (lo.min(size), hi)
}

/// Draws a 64-px latent of the given class.
pub fn sample_latent<R: Rng + ?Sized>(class: MorphologyClass, rng: &mut R) -> MorphologyLatent {
    sample_latent_sized(class, REFERENCE_SIZE, rng)
}

pub fn sample_latent_sized<R: Rng + ?Sized>(class: MorphologyClass, size: usize, rng: &mut R) -> MorphologyLatent {
    let scale = size as f64 / REFERENCE_SIZE as f64;
    let (lo, hi) = class.nuclei_range_for(size);
    let count = rng.random_range(lo..=hi);
    let (r_lo, r_hi) = class.radius_range();
    let (e_lo, e_hi) = class.eccentricity_range();
    let side = size as f64;

    let lumen = (class == MorphologyClass::Glandular).then(|| {
        let radius = rng.random_range(9.0..13.0) * scale;
        let margin = radius + 5.0 * scale;
        let center = (
            rng.random_range(margin..=(side - margin).max(margin)),
            rng.random_range(margin..=(side - margin).max(margin)),
        );
        Lumen { center, radius }
    });

    let mut nuclei = Vec::with_capacity(count);
    for i in 0..count {
        let radius = rng.random_range(r_lo..r_hi) * scale;
        let eccentricity = rng.random_range(e_lo..=e_hi);
        let density = rng.random_range(0.85..1.0);
        let inside = |c: f64| c.clamp(radius, side - radius);
        let (center, angle) = match lumen {
            // most gland nuclei sit on the rim, tangent to it; the rest are scattered
            Some(l) if i < count * 3 / 4 => {
                let theta = std::f64::consts::TAU * (i as f64 + rng.random_range(0.0..0.6)) / (count * 3 / 4) as f64;
                let rho = l.radius + radius + rng.random_range(0.0..1.5) * scale;
                let c = (inside(l.center.0 + rho * theta.cos()), inside(l.center.1 + rho * theta.sin()));
                (c, theta + std::f64::consts::FRAC_PI_2)
            }
            _ => {
                let mut c = (0.0, 0.0);
                // keep scattered nuclei out of the lumen when possible
                for _ in 0..20 {
                    c = (rng.random_range(radius..=side - radius), rng.random_range(radius..=side - radius));
                    let clear = lumen.is_none_or(|l| {
                        (c.0 - l.center.0).hypot(c.1 - l.center.1) > l.radius + radius
                    });
                    if clear {
                        break;
                    }
                }
                (c, rng.random_range(0.0..std::f64::consts::PI))
            }
        };
        nuclei.push(Nucleus {
            center,
            radius,
            eccentricity,
            angle,
            density,
        });
    }
    MorphologyLatent {
        size,
        class,
        nuclei,
        lumen,
        stroma_field: StromaField::sample(rng),
    }
}
