//! How far apart the two modalities sit in embedding space.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::probe::{kfold_accuracy, PROBE_L2};
use super::records::{registered_pairs, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::modality::Modality;

pub const PROBE_FOLDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMetrics {
    pub domain_probe_acc: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub silhouette_by_modality: f64,
}

/// Modality-prediction accuracy of a 5-fold logistic probe. Folds are drawn
/// over registered pairs (both embeddings of a pair share a fold) in a
/// `seed`-dependent order; unpaired records form their own fold units.
pub fn domain_probe_accuracy(records: &[EmbeddingRecord], seed: u64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("no embeddings".into()));
    }
    let mut unit_of: std::collections::HashMap<(&str, &str), usize> = Default::default();
    let mut units = Vec::with_capacity(records.len());
    for r in records {
        let next = unit_of.len();
        units.push(*unit_of.entry(r.pair_key()).or_insert(next));
    }
    let mut order: Vec<usize> = (0..unit_of.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let groups: Vec<usize> = units.iter().map(|&u| order[u]).collect();
    let x: Vec<Vec<f64>> = records.iter().map(|r| r.vector.clone()).collect();
    let y: Vec<u8> = records.iter().map(|r| r.modality.label()).collect();
    kfold_accuracy(&x, &y, &groups, PROBE_FOLDS, PROBE_L2)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Rank (0-based) of `target` among `sims`, ordering by descending
/// similarity with ties broken by position.
fn rank_of(sims: &[f64], target: usize) -> usize {
    let t = sims[target];
    sims.iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// Cross-modal retrieval recall at each `k`, averaged over both query
/// directions. Candidates are ordered by `(slide_id, patch_id)`, which fixes
/// how ties are broken.
pub fn cross_modal_recall(records: &[EmbeddingRecord], ks: &[usize]) -> Result<Vec<f64>> {
    let pairs = registered_pairs(records);
    if pairs.is_empty() {
        return Err(Error::Input("no registered pairs to retrieve".into()));
    }
    let he: Vec<Vec<f64>> = pairs.iter().map(|&(i, _)| unit(&records[i].vector)).collect();
    let sim: Vec<Vec<f64>> = pairs.iter().map(|&(_, j)| unit(&records[j].vector)).collect();
    let p = pairs.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut hits = vec![0usize; ks.len()];
    for (queries, keys) in [(&he, &sim), (&sim, &he)] {
        for i in 0..p {
            let sims: Vec<f64> = keys.iter().map(|k| dot(&queries[i], k)).collect();
            let r = rank_of(&sims, i);
            for (h, &k) in hits.iter_mut().zip(ks) {
                if r < k {
                    *h += 1;
                }
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / (2 * p) as f64).collect())
}

/// Mean silhouette coefficient with modality as the cluster label
/// (Euclidean distance). Near 1 means the modalities form separate islands.
pub fn silhouette_by_modality(records: &[EmbeddingRecord]) -> Result<f64> {
    let n = records.len();
    let n_he = records.iter().filter(|r| r.modality == Modality::He).count();
    if n_he < 2 || n - n_he < 2 {
        return Err(Error::Input("silhouette needs at least two records per modality".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, r) in records.iter().enumerate() {
        let (mut same, mut other) = (0.0, 0.0);
        for (j, s) in records.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = dist(&r.vector, &s.vector);
            if s.modality == r.modality {
                same += d;
            } else {
                other += d;
            }
        }
        let n_same = if r.modality == Modality::He { n_he } else { n - n_he };
        let a = same / (n_same - 1) as f64;
        let b = other / (n - n_same) as f64;
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / n as f64)
}

pub fn alignment_metrics(records: &[EmbeddingRecord], seed: u64) -> Result<AlignmentMetrics> {
    let recall = cross_modal_recall(records, &[1, 5])?;
    Ok(AlignmentMetrics {
        domain_probe_acc: domain_probe_accuracy(records, seed)?,
        recall_at_1: recall[0],
        recall_at_5: recall[1],
        silhouette_by_modality: silhouette_by_modality(records)?,
    })
}
