use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::latent::{sample_latent_sized, MorphologyClass, REFERENCE_SIZE};
use super::render::render;
use crate::curriculum::TrainingData;
use crate::error::{input_err, Error, Result};
use crate::modality::Modality;
use crate::raster::Image;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Fraction of dense-nuclei patches at which a slide counts as tumor-like.
pub const TUMOR_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub patch_id: String,
    pub class: MorphologyClass,
    /// Paths relative to the corpus root.
    pub he_path: PathBuf,
    pub sim_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    pub bag_label: u8,
    pub patches: Vec<PatchEntry>,
}

impl SlideManifest {
    pub fn dense_fraction(&self) -> f64 {
        if self.patches.is_empty() {
            return 0.0;
        }
        let dense = self
            .patches
            .iter()
            .filter(|p| p.class == MorphologyClass::DenseNuclei)
            .count();
        dense as f64 / self.patches.len() as f64
    }

    /// The bag label implied by the patch mix.
    pub fn implied_label(&self) -> u8 {
        u8::from(self.dense_fraction() >= TUMOR_FRACTION)
    }
}

/// One manifest line: a patch together with its slide's fields.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    slide_id: String,
    bag_label: u8,
    patch_id: String,
    class_id: u8,
    class_name: MorphologyClass,
    he_path: PathBuf,
    sim_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_slides: usize,
    pub patches_per_slide: usize,
    pub seed: u64,
    pub patch_size: usize,
}

impl CorpusConfig {
    pub fn new(n_slides: usize, patches_per_slide: usize, seed: u64) -> Self {
        Self {
            n_slides,
            patches_per_slide,
            seed,
            patch_size: REFERENCE_SIZE,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_slides == 0 || self.patches_per_slide == 0 {
            return Err(Error::Config("corpus needs at least one slide and one patch per slide".into()));
        }
        if self.patch_size < 16 {
            return Err(Error::Config(format!("patch size {} is below 16 px", self.patch_size)));
        }
        Ok(())
    }
}

pub fn slide_id(index: usize) -> String {
    format!("slide_{index:03}")
}

pub fn patch_id(index: usize) -> String {
    format!("patch_{index:03}")
}

/// Class sequence for one slide with the requested bag label. Tumor-like
/// slides get 30–60% dense patches, benign ones stay below the cutoff.
fn slide_classes(label: u8, n: usize, rng: &mut ChaCha8Rng) -> Vec<MorphologyClass> {
    let cutoff = (TUMOR_FRACTION * n as f64).ceil() as usize;
    let dense = if label == 1 {
        let target = (rng.random_range(0.3..0.6) * n as f64).round() as usize;
        target.max(cutoff).min(n)
    } else {
        let target = (rng.random_range(0.0..0.1) * n as f64).round() as usize;
        target.min(cutoff.saturating_sub(1))
    };
    let glandular_share = rng.random_range(0.3..0.7);
    let mut classes: Vec<MorphologyClass> = (0..n)
        .map(|i| {
            if i < dense {
                MorphologyClass::DenseNuclei
            } else if rng.random_bool(glandular_share) {
                MorphologyClass::Glandular
            } else {
                MorphologyClass::SparseStroma
            }
        })
        .collect();
    classes.shuffle(rng);
    classes
}

/// Writes `corpus/<slide_id>/<patch_id>_{he,sim}.png` and `manifest.jsonl`
/// under `out_dir`, and returns the slide manifests.
pub fn generate_corpus(n_slides: usize, patches_per_slide: usize, seed: u64, out_dir: &Path) -> Result<Vec<SlideManifest>> {
    generate_corpus_with(&CorpusConfig::new(n_slides, patches_per_slide, seed), out_dir)
}

pub fn generate_corpus_with(config: &CorpusConfig, out_dir: &Path) -> Result<Vec<SlideManifest>> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // balanced labels in a seed-dependent order
    let mut labels: Vec<u8> = (0..config.n_slides).map(|i| u8::from(i % 2 == 0)).collect();
    let mut top = ChaCha8Rng::seed_from_u64(config.seed);
    labels.shuffle(&mut top);

    let mut slides = Vec::with_capacity(config.n_slides);
    for (s, &label) in labels.iter().enumerate() {
        // each slide has its own stream, so slides can be generated independently
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1 + s as u64);
        let sid = slide_id(s);
        let dir = out_dir.join(&sid);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let classes = slide_classes(label, config.patches_per_slide, &mut rng);
        let mut patches = Vec::with_capacity(classes.len());
        for (p, class) in classes.into_iter().enumerate() {
            let latent = sample_latent_sized(class, config.patch_size, &mut rng);
            let pid = patch_id(p);
            let entry = PatchEntry {
                patch_id: pid.clone(),
                class,
                he_path: PathBuf::from(&sid).join(format!("{pid}_he.png")),
                sim_path: PathBuf::from(&sid).join(format!("{pid}_sim.png")),
            };
            for modality in Modality::BOTH {
                // independent noise stream per modality
                let mut noise = ChaCha8Rng::seed_from_u64(rng.random());
                let img = render(&latent, modality, &mut noise);
                let rel = match modality {
                    Modality::He => &entry.he_path,
                    Modality::Sim => &entry.sim_path,
                };
                img.save_png(&out_dir.join(rel))?;
            }
            patches.push(entry);
        }
        let slide = SlideManifest {
            slide_id: sid,
            bag_label: 0,
            patches,
        };
        let bag_label = slide.implied_label();
        slides.push(SlideManifest { bag_label, ..slide });
    }
    write_manifest(out_dir, &slides)?;
    Ok(slides)
}

fn write_manifest(out_dir: &Path, slides: &[SlideManifest]) -> Result<()> {
    let path = out_dir.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for slide in slides {
        for p in &slide.patches {
            let rec = ManifestRecord {
                slide_id: slide.slide_id.clone(),
                bag_label: slide.bag_label,
                patch_id: p.patch_id.clone(),
                class_id: p.class.id(),
                class_name: p.class,
                he_path: p.he_path.clone(),
                sim_path: p.sim_path.clone(),
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Serde(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Parses `manifest.jsonl` back into slides, in file order.
pub fn read_manifest(corpus_dir: &Path) -> Result<Vec<SlideManifest>> {
    let path = corpus_dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut slides: Vec<SlideManifest> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| input_err!("{}:{}: {e}", path.display(), n + 1))?;
        if MorphologyClass::from_id(rec.class_id)? != rec.class_name {
            return Err(input_err!(
                "{}:{}: class id {} disagrees with class name {}",
                path.display(),
                n + 1,
                rec.class_id,
                rec.class_name
            ));
        }
        let entry = PatchEntry {
            patch_id: rec.patch_id,
            class: rec.class_name,
            he_path: rec.he_path,
            sim_path: rec.sim_path,
        };
        match slides.last_mut() {
            Some(s) if s.slide_id == rec.slide_id => {
                if s.bag_label != rec.bag_label {
                    return Err(input_err!("slide {} has inconsistent bag labels", rec.slide_id));
                }
                s.patches.push(entry);
            }
            _ => {
                if slides.iter().any(|s| s.slide_id == rec.slide_id) {
                    return Err(input_err!("records of slide {} are not contiguous", rec.slide_id));
                }
                slides.push(SlideManifest {
                    slide_id: rec.slide_id,
                    bag_label: rec.bag_label,
                    patches: vec![entry],
                });
            }
        }
    }
    if slides.is_empty() {
        return Err(input_err!("{} lists no patches", path.display()));
    }
    Ok(slides)
}

/// Global id of a patch, `<slide_id>/<patch_id>`.
pub fn pair_id(slide: &SlideManifest, patch: &PatchEntry) -> String {
    format!("{}/{}", slide.slide_id, patch.patch_id)
}

/// Ids of manifest patches whose image files are absent, in manifest order.
pub fn missing_files(corpus_dir: &Path, slides: &[SlideManifest]) -> Vec<String> {
    let mut missing = Vec::new();
    for s in slides {
        for p in &s.patches {
            for rel in [&p.he_path, &p.sim_path] {
                if !corpus_dir.join(rel).is_file() {
                    missing.push(format!("{} ({})", pair_id(s, p), rel.display()));
                }
            }
        }
    }
    missing
}

/// A corpus read into memory.
#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub slides: Vec<SlideManifest>,
    pub data: TrainingData,
}

impl LoadedCorpus {
    /// `(slide index, patch index)` of every row of `data`.
    pub fn locations(&self) -> Vec<(usize, usize)> {
        self.slides
            .iter()
            .enumerate()
            .flat_map(|(s, slide)| (0..slide.patches.len()).map(move |p| (s, p)))
            .collect()
    }

    pub fn classes(&self) -> Vec<MorphologyClass> {
        self.slides.iter().flat_map(|s| s.patches.iter().map(|p| p.class)).collect()
    }
}

/// Reads the manifest and every image. Missing files are reported together.
pub fn load_corpus(corpus_dir: &Path) -> Result<LoadedCorpus> {
    let slides = read_manifest(corpus_dir)?;
    let missing = missing_files(corpus_dir, &slides);
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let mut ids = Vec::new();
    let mut he = Vec::new();
    let mut sim = Vec::new();
    for s in &slides {
        for p in &s.patches {
            ids.push(pair_id(s, p));
            he.push(Image::load_png(&corpus_dir.join(&p.he_path))?);
            sim.push(Image::load_png(&corpus_dir.join(&p.sim_path))?);
        }
    }
    let data = TrainingData::new(ids, he, sim)?;
    Ok(LoadedCorpus { slides, data })
}
