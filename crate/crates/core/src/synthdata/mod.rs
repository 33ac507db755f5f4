//! Deterministic synthetic paired H&E/SIM corpus with ground-truth morphology.

mod corpus;
mod latent;
mod render;

pub use corpus::{
    generate_corpus, generate_corpus_with, load_corpus, missing_files, pair_id, patch_id, read_manifest,
    slide_id, CorpusConfig, LoadedCorpus, PatchEntry, SlideManifest, MANIFEST_FILE, TUMOR_FRACTION,
};
pub use latent::{
    sample_latent, sample_latent_sized, Lumen, MorphologyClass, MorphologyLatent, Nucleus, StromaField,
    REFERENCE_SIZE,
};
pub use render::{mask_iou, otsu_nuclei_mask, otsu_threshold, render};
