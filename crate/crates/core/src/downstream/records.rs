//! Frozen embeddings of a corpus and their on-disk store.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::model::{Branch, Head, ModelState};
use crate::modality::Modality;
use crate::raster::{Image, ImageBatch};
use crate::synthdata::{missing_files, pair_id, read_manifest, MorphologyClass};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub slide_id: String,
    pub patch_id: String,
    pub modality: Modality,
    pub class: MorphologyClass,
    pub bag_label: u8,
    #[serde(skip)]
    pub vector: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn pair_key(&self) -> (&str, &str) {
        (&self.slide_id, &self.patch_id)
    }
}

/// Images encoded per forward call; bounds peak memory.
const EMBED_CHUNK: usize = 64;

/// Encodes every patch of the corpus in both modalities with the student
/// backbone (class token, no projection head). Records come in manifest
/// order, H&E before SIM within each patch.
pub fn embed_corpus(model: &ModelState, corpus_dir: &Path) -> Result<Vec<EmbeddingRecord>> {
    let slides = read_manifest(corpus_dir)?;
    let missing = missing_files(corpus_dir, &slides);
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let mut jobs = Vec::new();
    for s in &slides {
        for p in &s.patches {
            for (modality, rel) in [(Modality::He, &p.he_path), (Modality::Sim, &p.sim_path)] {
                jobs.push((s, p, modality, corpus_dir.join(rel)));
            }
        }
    }
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(EMBED_CHUNK) {
        let images = chunk
            .iter()
            .map(|(_, _, _, path)| Image::load_png(path))
            .collect::<Result<Vec<_>>>()?;
        let z = model.encode(&ImageBatch::stack(&images)?, Branch::Student, Head::None)?;
        for ((s, p, modality, _), row) in chunk.iter().zip(z.rows()) {
            let vector: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite embedding for {}", pair_id(s, p))));
            }
            out.push(EmbeddingRecord {
                slide_id: s.slide_id.clone(),
                patch_id: p.patch_id.clone(),
                modality: *modality,
                class: p.class,
                bag_label: s.bag_label,
                vector,
            });
        }
    }
    Ok(out)
}

/// Records of one modality, in input order.
pub fn by_modality(records: &[EmbeddingRecord], modality: Modality) -> Vec<&EmbeddingRecord> {
    records.iter().filter(|r| r.modality == modality).collect()
}

/// Registered `(he, sim)` index pairs, ordered by `(slide_id, patch_id)`.
pub fn registered_pairs(records: &[EmbeddingRecord]) -> Vec<(usize, usize)> {
    let mut sim_at: HashMap<(&str, &str), usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.modality == Modality::Sim {
            sim_at.insert(r.pair_key(), i);
        }
    }
    let mut pairs: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.modality == Modality::He)
        .filter_map(|(i, r)| sim_at.get(&r.pair_key()).map(|&j| (i, j)))
        .collect();
    pairs.sort_by(|a, b| records[a.0].pair_key().cmp(&records[b.0].pair_key()));
    pairs
}

const VECTORS_FILE: &str = "embeddings.safetensors";
const RECORDS_FILE: &str = "embeddings.jsonl";

/// Writes the vectors as one `[n, d]` f32 array plus a JSONL sidecar with
/// one line per row.
pub fn write_embeddings(dir: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = records.first().map_or(0, |r| r.vector.len());
    if records.iter().any(|r| r.vector.len() != d) {
        return Err(input_err!("embeddings have different lengths"));
    }
    let bytes: Vec<u8> = records
        .iter()
        .flat_map(|r| r.vector.iter().flat_map(|&v| (v as f32).to_le_bytes()))
        .collect();
    let view = TensorView::new(Dtype::F32, vec![records.len(), d], &bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let archive = safetensors::serialize([("embeddings", view)], None)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let vpath = dir.join(VECTORS_FILE);
    fs::write(&vpath, archive).map_err(|e| Error::io(&vpath, e))?;

    let rpath = dir.join(RECORDS_FILE);
    let file = fs::File::create(&rpath).map_err(|e| Error::io(&rpath, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&rpath, e))?;
    }
    w.flush().map_err(|e| Error::io(&rpath, e))
}

pub fn read_embeddings(dir: &Path) -> Result<Vec<EmbeddingRecord>> {
    let vpath = dir.join(VECTORS_FILE);
    let bytes = fs::read(&vpath).map_err(|e| Error::io(&vpath, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let view = st.tensor("embeddings").map_err(|e| Error::Checkpoint(e.to_string()))?;
    let [n, d] = view.shape() else {
        return Err(Error::Checkpoint("embedding array is not two-dimensional".into()));
    };
    let (n, d) = (*n, *d);
    let values: Vec<f64> = view
        .data()
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();

    let rpath = dir.join(RECORDS_FILE);
    let file = fs::File::open(&rpath).map_err(|e| Error::io(&rpath, e))?;
    let mut records = Vec::with_capacity(n);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&rpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Serde(e.to_string()))?;
        records.push(rec);
    }
    if records.len() != n {
        return Err(input_err!("{} sidecar rows for {n} vectors", records.len()));
    }
    for (i, r) in records.iter_mut().enumerate() {
        r.vector = values[i * d..(i + 1) * d].to_vec();
    }
    Ok(records)
}
