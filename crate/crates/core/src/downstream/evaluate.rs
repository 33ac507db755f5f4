//! Slide-level MIL and clustering evaluation over frozen embeddings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::abmil::{abmil_predict, abmil_train, AbmilConfig, Bag};
use super::alignment::{alignment_metrics, AlignmentMetrics};
use super::gmm::{gmm_assign, gmm_fit, GmmConfig, DEFAULT_COMPONENTS};
use super::prototypes::{kmedoids_prototypes, match_clusters};
use super::records::{registered_pairs, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::modality::Modality;

/// Area under the ROC curve (Mann-Whitney, ties count half). `None` when
/// only one class is present.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Train/validation/test fractions of slides.
pub const SPLIT: (f64, f64, f64) = (0.70, 0.15, 0.15);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlideSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Label-stratified 70/15/15 split of slides. Validation and test get at
/// least one slide each when there are three or more slides.
pub fn split_slides(labels: &[u8], seed: u64) -> Result<SlideSplit> {
    let n = labels.len();
    if n < 3 {
        return Err(Error::Input(format!("{n} slides cannot be split three ways")));
    }
    let n_test = ((SPLIT.2 * n as f64).round() as usize).max(1);
    let n_val = ((SPLIT.1 * n as f64).round() as usize).max(1);
    if n_test + n_val >= n {
        return Err(Error::Input(format!("{n} slides leave nothing to train on")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<usize>> = [0u8, 1]
        .iter()
        .map(|&l| {
            let mut g: Vec<usize> = (0..n).filter(|&i| labels[i] == l).collect();
            g.shuffle(&mut rng);
            g
        })
        .collect();
    // interleave the label groups so every prefix is close to balanced
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
    let mut order = Vec::with_capacity(n);
    for i in 0..groups[0].len() {
        for g in &groups {
            if let Some(&s) = g.get(i) {
                order.push(s);
            }
        }
    }
    Ok(SlideSplit {
        test: order[..n_test].to_vec(),
        val: order[n_test..n_test + n_val].to_vec(),
        train: order[n_test + n_val..].to_vec(),
    })
}

/// One bag per slide from the records of `modality`, in first-seen order.
pub fn bags_for(records: &[EmbeddingRecord], modality: Modality) -> Vec<Bag> {
    let mut bags: Vec<Bag> = Vec::new();
    for r in records.iter().filter(|r| r.modality == modality) {
        match bags.iter_mut().find(|b| b.slide_id == r.slide_id) {
            Some(b) => b.instances.push(r.vector.clone()),
            None => bags.push(Bag {
                slide_id: r.slide_id.clone(),
                instances: vec![r.vector.clone()],
                label: r.bag_label,
            }),
        }
    }
    bags
}

/// Test-set outcome of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub seed: u64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    /// `confusion[truth][predicted]`.
    pub confusion: [[usize; 2]; 2],
    pub test_slides: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilReport {
    /// Test accuracy averaged over the repeated splits.
    pub accuracy: f64,
    /// Test AUC averaged over splits whose test set holds both labels.
    pub auc: Option<f64>,
    pub repeats: usize,
    /// Confusion counts summed over splits.
    pub confusion: [[usize; 2]; 2],
    pub splits: Vec<SplitResult>,
}

/// Repeats a fresh stratified split, ABMIL fit and test evaluation
/// `repeats` times and averages.
pub fn mil_evaluate(bags: &[Bag], repeats: usize, config: &AbmilConfig, seed: u64) -> Result<MilReport> {
    if repeats == 0 {
        return Err(Error::Input("need at least one MIL repeat".into()));
    }
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let mut splits = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let split_seed = seed.wrapping_add(r as u64);
        let split = split_slides(&labels, split_seed)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| bags[i].clone()).collect::<Vec<_>>();
        let cfg = AbmilConfig {
            seed: split_seed,
            ..config.clone()
        };
        let params = abmil_train(&pick(&split.train), &pick(&split.val), &cfg)?;
        let mut scores = Vec::new();
        let mut truth = Vec::new();
        for &i in &split.test {
            scores.push(abmil_predict(&params, &bags[i])?.0);
            truth.push(bags[i].label);
        }
        let mut confusion = [[0usize; 2]; 2];
        for (s, &t) in scores.iter().zip(&truth) {
            confusion[t as usize][usize::from(*s >= 0.5)] += 1;
        }
        splits.push(SplitResult {
            seed: split_seed,
            accuracy: (confusion[0][0] + confusion[1][1]) as f64 / truth.len() as f64,
            auc: roc_auc(&scores, &truth),
            confusion,
            test_slides: split.test.iter().map(|&i| bags[i].slide_id.clone()).collect(),
        });
    }
    let aucs: Vec<f64> = splits.iter().filter_map(|s| s.auc).collect();
    let mut confusion = [[0usize; 2]; 2];
    for s in &splits {
        for t in 0..2 {
            for p in 0..2 {
                confusion[t][p] += s.confusion[t][p];
            }
        }
    }
    Ok(MilReport {
        accuracy: splits.iter().map(|s| s.accuracy).sum::<f64>() / repeats as f64,
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        repeats,
        confusion,
        splits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub n_components: usize,
    /// Registered pairs whose SIM component matches their H&E component.
    pub agreement: f64,
    pub mean_matched_cosine: f64,
}

/// Everything the clustering task produces, pair by pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDetail {
    pub report: ClusterReport,
    /// `(slide_id, patch_id)` of each registered pair, in key order.
    pub pairs: Vec<(String, String)>,
    pub he_labels: Vec<usize>,
    pub sim_labels: Vec<usize>,
    /// H&E component `i` is matched to SIM component `matching[i]`.
    pub matching: Vec<usize>,
    /// Up to [`PROTOTYPES_PER_COMPONENT`] medoid pair ids per component.
    pub he_prototypes: Vec<Vec<String>>,
    pub sim_prototypes: Vec<Vec<String>>,
}

pub const PROTOTYPES_PER_COMPONENT: usize = 5;

/// Fits one mixture per modality, matches components, scores agreement and
/// picks medoid prototypes.
pub fn cluster_detail(records: &[EmbeddingRecord], n_components: usize, seed: u64) -> Result<ClusterDetail> {
    let pairs = registered_pairs(records);
    if pairs.is_empty() {
        return Err(Error::Input("no registered pairs to cluster".into()));
    }
    let he: Vec<Vec<f64>> = pairs.iter().map(|&(i, _)| records[i].vector.clone()).collect();
    let sim: Vec<Vec<f64>> = pairs.iter().map(|&(_, j)| records[j].vector.clone()).collect();
    let ids: Vec<String> = pairs
        .iter()
        .map(|&(i, _)| format!("{}/{}", records[i].slide_id, records[i].patch_id))
        .collect();
    let cfg = GmmConfig::new(n_components, seed);
    let he_model = gmm_fit(&he, &cfg)?;
    let sim_model = gmm_fit(&sim, &cfg)?;
    let matching = match_clusters(&he_model, &sim_model)?;
    let (he_labels, _) = gmm_assign(&he_model, &he)?;
    let (sim_labels, _) = gmm_assign(&sim_model, &sim)?;
    Ok(ClusterDetail {
        report: ClusterReport {
            n_components,
            agreement: matching.agreement(&he_labels, &sim_labels)?,
            mean_matched_cosine: matching.mean_cosine,
        },
        pairs: pairs
            .iter()
            .map(|&(i, _)| (records[i].slide_id.clone(), records[i].patch_id.clone()))
            .collect(),
        he_prototypes: kmedoids_prototypes(&he_model, &he, &ids, PROTOTYPES_PER_COMPONENT)?,
        sim_prototypes: kmedoids_prototypes(&sim_model, &sim, &ids, PROTOTYPES_PER_COMPONENT)?,
        he_labels,
        sim_labels,
        matching: matching.perm,
    })
}

pub fn cluster_evaluate(records: &[EmbeddingRecord], n_components: usize, seed: u64) -> Result<ClusterReport> {
    Ok(cluster_detail(records, n_components, seed)?.report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mil_repeats: usize,
    pub abmil: AbmilConfig,
    pub n_components: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mil_repeats: 20,
            abmil: AbmilConfig::default(),
            n_components: DEFAULT_COMPONENTS,
            seed: 0,
        }
    }
}

/// Every downstream metric for one set of embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alignment: AlignmentMetrics,
    pub mil_he: MilReport,
    pub mil_sim: MilReport,
    pub cluster: ClusterReport,
}

impl EvalReport {
    /// Mean of SIM-side MIL accuracy and cross-modal cluster agreement.
    pub fn sim_composite(&self) -> f64 {
        (self.mil_sim.accuracy + self.cluster.agreement) / 2.0
    }
}

pub fn evaluate_records(records: &[EmbeddingRecord], config: &EvalConfig) -> Result<EvalReport> {
    Ok(EvalReport {
        alignment: alignment_metrics(records, config.seed)?,
        mil_he: mil_evaluate(&bags_for(records, Modality::He), config.mil_repeats, &config.abmil, config.seed)?,
        mil_sim: mil_evaluate(&bags_for(records, Modality::Sim), config.mil_repeats, &config.abmil, config.seed)?,
        cluster: cluster_evaluate(records, config.n_components, config.seed)?,
    })
}
