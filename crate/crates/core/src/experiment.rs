//! The staged ablation sweep: a SIM-only baseline plus every prefix of the
//! joint curriculum, each checkpoint embedded and evaluated.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curriculum::{run_curriculum, Checkpoint, CurriculumConfig, TraceRow};
use crate::downstream::{embed_corpus, evaluate_records, EmbeddingRecord, EvalConfig, EvalReport};
use crate::error::{input_err, Error, Result};
use crate::modality::Modality;
use crate::synthdata::LoadedCorpus;

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "sim-only")]
    SimOnly,
    #[serde(rename = "joint-1")]
    Joint1,
    #[serde(rename = "+DANN")]
    Dann,
    #[serde(rename = "+NCE")]
    Nce,
    #[serde(rename = "+Recon")]
    Recon,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::SimOnly, Variant::Joint1, Variant::Dann, Variant::Nce, Variant::Recon];
    /// The joint rows, in curriculum order.
    pub const JOINT: [Variant; 4] = [Variant::Joint1, Variant::Dann, Variant::Nce, Variant::Recon];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SimOnly => "sim-only",
            Variant::Joint1 => "joint-1",
            Variant::Dann => "+DANN",
            Variant::Nce => "+NCE",
            Variant::Recon => "+Recon",
        }
    }

    /// Last curriculum stage the variant trains.
    pub fn stage(self) -> u8 {
        match self {
            Variant::SimOnly | Variant::Joint1 => 1,
            Variant::Dann => 2,
            Variant::Nce => 3,
            Variant::Recon => 4,
        }
    }

    pub fn joint_for_stage(stage: u8) -> Result<Self> {
        Variant::JOINT
            .into_iter()
            .find(|v| v.stage() == stage)
            .ok_or_else(|| input_err!("no joint variant ends at stage {stage}"))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| input_err!("unknown ablation row {s:?}"))
    }
}

/// Flattened metrics of one evaluated checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub domain_probe_acc: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub silhouette_by_modality: f64,
    /// SIM-side slide accuracy.
    pub mil_acc: f64,
    pub mil_auc: Option<f64>,
    pub mil_acc_he: f64,
    pub cluster_agreement: f64,
    /// Mean of `mil_acc` and `cluster_agreement`.
    pub sim_composite: f64,
}

impl AblationRow {
    pub fn from_report(variant: Variant, seed: u64, r: &EvalReport) -> Self {
        Self {
            variant,
            seed,
            domain_probe_acc: r.alignment.domain_probe_acc,
            recall_at_1: r.alignment.recall_at_1,
            recall_at_5: r.alignment.recall_at_5,
            silhouette_by_modality: r.alignment.silhouette_by_modality,
            mil_acc: r.mil_sim.accuracy,
            mil_auc: r.mil_sim.auc,
            mil_acc_he: r.mil_he.accuracy,
            cluster_agreement: r.cluster.agreement,
            sim_composite: r.sim_composite(),
        }
    }
}

/// A config whose only stage is stage 1 restricted to SIM crops.
pub fn sim_only_config(config: &CurriculumConfig) -> Result<CurriculumConfig> {
    let mut out = config.clone();
    let mut first = config
        .stages
        .first()
        .cloned()
        .ok_or_else(|| Error::Config("config has no stages".into()))?;
    first.modalities = vec![Modality::Sim];
    out.stages = vec![first];
    out.validate()?;
    Ok(out)
}

/// Called with every finished checkpoint, its embeddings and its report.
pub type CheckpointHook<'a> = dyn FnMut(Variant, &Checkpoint, &[EmbeddingRecord], &EvalReport) -> Result<()> + 'a;

/// Trains and evaluates the requested variants for one seed. Joint rows
/// share a single curriculum run, truncated after the last stage needed.
pub fn run_ablation_seed(
    config: &CurriculumConfig,
    corpus: &LoadedCorpus,
    corpus_dir: &Path,
    eval: &EvalConfig,
    seed: u64,
    variants: &[Variant],
    on_step: &mut dyn FnMut(Variant, &TraceRow),
    on_checkpoint: &mut CheckpointHook<'_>,
) -> Result<Vec<AblationRow>> {
    let mut config = config.clone();
    config.seed = seed;
    let eval = EvalConfig {
        seed,
        ..eval.clone()
    };
    let mut rows = Vec::new();
    let mut finish = |variant: Variant, ck: &Checkpoint, rows: &mut Vec<AblationRow>| -> Result<()> {
        let records = embed_corpus(&ck.model, corpus_dir)?;
        let report = evaluate_records(&records, &eval)?;
        on_checkpoint(variant, ck, &records, &report)?;
        rows.push(AblationRow::from_report(variant, seed, &report));
        Ok(())
    };

    if variants.contains(&Variant::SimOnly) {
        let baseline = sim_only_config(&config)?;
        let mut step = |r: &TraceRow| on_step(Variant::SimOnly, r);
        let mut done = Vec::new();
        run_curriculum(&baseline, &corpus.data, Some(1), &mut step, &mut |ck| {
            done.push(ck.clone());
            Ok(())
        })?;
        finish(Variant::SimOnly, &done[0], &mut rows)?;
    }

    let last = variants.iter().filter(|v| **v != Variant::SimOnly).map(|v| v.stage()).max();
    if let Some(last) = last {
        let mut step = |r: &TraceRow| {
            if let Ok(v) = Variant::joint_for_stage(r.stage) {
                on_step(v, r);
            }
        };
        let mut stage_hook = |ck: &Checkpoint| -> Result<()> {
            let v = Variant::joint_for_stage(ck.stage_id)?;
            if variants.contains(&v) {
                finish(v, ck, &mut rows)?;
            }
            Ok(())
        };
        run_curriculum(&config, &corpus.data, Some(last), &mut step, &mut stage_hook)?;
    }
    Ok(rows)
}

/// Median of a nonempty sample (mean of the middle two for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Per-variant medians over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub variant: Variant,
    pub seeds: usize,
    pub domain_probe_acc: f64,
    pub recall_at_1: f64,
    pub mil_acc: f64,
    pub mil_acc_he: f64,
    pub cluster_agreement: f64,
    pub sim_composite: f64,
}

pub fn summarize(rows: &[AblationRow]) -> Vec<MedianRow> {
    Variant::ALL
        .into_iter()
        .filter_map(|variant| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == variant).collect();
            let med = |f: fn(&AblationRow) -> f64| median(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            Some(MedianRow {
                variant,
                seeds: mine.len(),
                domain_probe_acc: med(|r| r.domain_probe_acc)?,
                recall_at_1: med(|r| r.recall_at_1)?,
                mil_acc: med(|r| r.mil_acc)?,
                mil_acc_he: med(|r| r.mil_acc_he)?,
                cluster_agreement: med(|r| r.cluster_agreement)?,
                sim_composite: med(|r| r.sim_composite)?,
            })
        })
        .collect()
}

/// Writes one CSV line per `(variant, seed)`.
pub fn write_table<W: std::io::Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "seed",
        "domain_probe_acc",
        "recall_at_1",
        "recall_at_5",
        "silhouette_by_modality",
        "mil_acc",
        "mil_auc",
        "mil_acc_he",
        "cluster_agreement",
        "sim_composite",
    ])
    .map_err(|e| Error::Serde(e.to_string()))?;
    for r in rows {
        let f = |v: f64| format!("{v:.6}");
        w.write_record([
            r.variant.as_str().to_string(),
            r.seed.to_string(),
            f(r.domain_probe_acc),
            f(r.recall_at_1),
            f(r.recall_at_5),
            f(r.silhouette_by_modality),
            f(r.mil_acc),
            r.mil_auc.map(f).unwrap_or_default(),
            f(r.mil_acc_he),
            f(r.cluster_agreement),
            f(r.sim_composite),
        ])
        .map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))
}
