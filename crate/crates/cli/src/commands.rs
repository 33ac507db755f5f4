use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use serde_json::json;
use xmodal_core::curriculum::{train_stage, Checkpoint, CurriculumConfig, TraceRow};
use xmodal_core::downstream::{
    alignment_metrics, bags_for, cluster_detail, embed_corpus, mil_evaluate, project_2d, write_embeddings,
    AbmilConfig, EmbeddingRecord, EvalConfig, EvalReport, DEFAULT_COMPONENTS,
};
use xmodal_core::experiment::{run_ablation_seed, summarize, write_table, AblationRow, Variant};
use xmodal_core::synthdata::{generate_corpus_with, load_corpus, CorpusConfig, MANIFEST_FILE};
use xmodal_core::{Error, Modality};

use crate::error::{CliError, CliResult};
use crate::rundir::{load_config, prepare_output, write_json, RunDirectory, TraceSink, REPORT_FILE};
use crate::{plot, Projection, Task};

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub slides: usize,
    #[arg(long, default_value_t = 50)]
    pub patches: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Patch side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    prepare_output(&a.out, a.force)?;
    let config = CorpusConfig {
        patch_size: a.size,
        ..CorpusConfig::new(a.slides, a.patches, a.seed)
    };
    let slides = generate_corpus_with(&config, &a.out)?;
    let pairs: usize = slides.iter().map(|s| s.patches.len()).sum();
    let tumor = slides.iter().filter(|s| s.bag_label == 1).count();
    info!("wrote {pairs} pairs over {} slides ({tumor} tumor-like) to {}", slides.len(), a.out.display());
    Ok(())
}

pub fn write_default_config(out: &Path, force: bool) -> CliResult<()> {
    if out.exists() && !force {
        return Err(CliError::Refusal(format!("{} exists; pass --force to overwrite", out.display())));
    }
    let text = CurriculumConfig::default().to_toml()?;
    fs::write(out, text).map_err(|e| CliError::io(out, e))
}

fn config_or_default(path: Option<&Path>) -> CliResult<CurriculumConfig> {
    let config = match path {
        Some(p) => load_config(p)?,
        None => CurriculumConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn check_corpus(dir: &Path) -> CliResult<()> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(CliError::Core(Error::Input(format!(
            "{} has no {MANIFEST_FILE}; generate one with `xmodal synth`",
            dir.display()
        ))));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// TOML config; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4), default_value_t = 4)]
    pub through_stage: u8,
    /// Continue from the latest checkpoint in --out.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
}

pub fn pretrain(a: &PretrainArgs) -> CliResult<()> {
    check_corpus(&a.corpus)?;
    let run = RunDirectory::new(&a.out);
    let (config, start) = if a.resume {
        let snapshot = run.read_config()?;
        if let Some(path) = &a.config {
            if load_config(path)?.hash() != snapshot.hash() {
                return Err(Error::Sequencing(format!(
                    "{} differs from the config this run was started with",
                    path.display()
                ))
                .into());
            }
        }
        let ck = match run.latest_stage() {
            Some(k) => Checkpoint::load(&run.stage_path(k))?,
            None => Checkpoint::fresh(&snapshot)?,
        };
        if ck.stage_id >= a.through_stage {
            return Err(Error::Sequencing(format!(
                "run already holds stage {} but --through-stage is {}",
                ck.stage_id, a.through_stage
            ))
            .into());
        }
        run.truncate_trace(ck.step)?;
        (snapshot, ck)
    } else {
        let config = config_or_default(a.config.as_deref())?;
        prepare_output(&a.out, a.force)?;
        run.write_config(&config)?;
        let fresh = Checkpoint::fresh(&config)?;
        (config, fresh)
    };
    if a.through_stage as usize > config.stages.len() {
        return Err(CliError::Usage(format!(
            "--through-stage {} exceeds the {} configured stages",
            a.through_stage,
            config.stages.len()
        )));
    }
    let corpus = load_corpus(&a.corpus)?;
    let mut sink = TraceSink::new(run.trace_path());
    let mut ck = start;
    for spec in &config.stages[ck.stage_id as usize..a.through_stage as usize] {
        info!("stage {}: {} steps", spec.stage_id, spec.steps);
        let mut last = None;
        ck = train_stage(spec, &corpus.data, ck, &config, &mut |row: &TraceRow| {
            sink.push(row);
            last = Some(*row);
        })?;
        sink.flush()?;
        run.save_checkpoint(&ck)?;
        if let Some(r) = last {
            info!("stage {} done at step {}: total loss {:.4}", r.stage, r.step, r.l_total);
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn embed(a: &EmbedArgs) -> CliResult<()> {
    check_corpus(&a.corpus)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    prepare_output(&a.out, a.force)?;
    let records = embed_corpus(&ck.model, &a.corpus)?;
    write_embeddings(&a.out, &records)?;
    info!("wrote {} embeddings to {}", records.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Repeated slide splits for the MIL task.
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long, default_value_t = DEFAULT_COMPONENTS)]
    pub components: usize,
    #[arg(long, value_enum, default_value = "pca")]
    pub projection: Projection,
    #[arg(long)]
    pub force: bool,
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    check_corpus(&a.corpus)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    prepare_output(&a.out, a.force)?;
    let records = embed_corpus(&ck.model, &a.corpus)?;
    write_embeddings(&a.out.join("embeddings"), &records)?;
    let header = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "stage": ck.stage_id,
        "step": ck.step,
        "seed": a.seed,
    });
    let body = match a.task {
        Task::Align => eval_align(a, &records)?,
        Task::Mil => eval_mil(a, &records)?,
        Task::Cluster => eval_cluster(a, &records)?,
    };
    let mut report = json!({ "task": format!("{:?}", a.task).to_lowercase() });
    for src in [header, body] {
        if let (Some(dst), serde_json::Value::Object(map)) = (report.as_object_mut(), src) {
            dst.extend(map);
        }
    }
    write_json(&a.out.join(REPORT_FILE), &report)?;
    info!("report written to {}", a.out.join(REPORT_FILE).display());
    Ok(())
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::output(path, e))
}

fn eval_align(a: &EvalArgs, records: &[EmbeddingRecord]) -> CliResult<serde_json::Value> {
    let metrics = alignment_metrics(records, a.seed)?;
    let vectors: Vec<Vec<f64>> = records.iter().map(|r| r.vector.clone()).collect();
    let points = project_2d(&vectors, a.projection.into(), a.seed)?;
    let path = a.out.join("projection.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["slide_id", "patch_id", "modality", "class", "x", "y"])
        .map_err(|e| CliError::output(&path, e))?;
    for (r, p) in records.iter().zip(&points) {
        w.write_record([
            r.slide_id.as_str(),
            r.patch_id.as_str(),
            r.modality.as_str(),
            r.class.as_str(),
            &p[0].to_string(),
            &p[1].to_string(),
        ])
        .map_err(|e| CliError::output(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let by_modality: Vec<usize> = records.iter().map(|r| r.modality.label() as usize).collect();
    let by_class: Vec<usize> = records.iter().map(|r| r.class.id() as usize).collect();
    plot::scatter(&points, &by_modality, &a.out.join("projection_modality.png"))?;
    plot::scatter(&points, &by_class, &a.out.join("projection_class.png"))?;
    let mut v = serde_json::to_value(&metrics).map_err(|e| CliError::output(&a.out, e))?;
    v["projection"] = json!(match a.projection {
        Projection::Pca => "pca",
        Projection::Tsne => "tsne",
    });
    Ok(v)
}

fn eval_mil(a: &EvalArgs, records: &[EmbeddingRecord]) -> CliResult<serde_json::Value> {
    let mut out = serde_json::Map::new();
    for modality in Modality::BOTH {
        let report = mil_evaluate(&bags_for(records, modality), a.repeats, &AbmilConfig::default(), a.seed)?;
        plot::confusion(&report.confusion, &a.out.join(format!("confusion_{modality}.png")))?;
        info!(
            "{modality}: accuracy {:.3}, auc {}",
            report.accuracy,
            report.auc.map_or("n/a".into(), |v| format!("{v:.3}"))
        );
        out.insert(
            modality.as_str().into(),
            serde_json::to_value(&report).map_err(|e| CliError::output(&a.out, e))?,
        );
    }
    Ok(serde_json::Value::Object(out))
}

fn eval_cluster(a: &EvalArgs, records: &[EmbeddingRecord]) -> CliResult<serde_json::Value> {
    let detail = cluster_detail(records, a.components, a.seed)?;
    let path = a.out.join("clusters.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["slide_id", "patch_id", "he_component", "sim_component", "agrees"])
        .map_err(|e| CliError::output(&path, e))?;
    // slide rows of component ids for the maps; SIM ids are relabeled through
    // the matching so agreeing pairs share a color
    let mut inverse = vec![0; detail.matching.len()];
    for (h, &s) in detail.matching.iter().enumerate() {
        inverse[s] = h;
    }
    let mut he_map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut sim_map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (slide, patch)) in detail.pairs.iter().enumerate() {
        let (h, s) = (detail.he_labels[i], detail.sim_labels[i]);
        w.write_record([
            slide.as_str(),
            patch.as_str(),
            &h.to_string(),
            &s.to_string(),
            &(detail.matching[h] == s).to_string(),
        ])
        .map_err(|e| CliError::output(&path, e))?;
        he_map.entry(slide).or_default().push(h);
        sim_map.entry(slide).or_default().push(inverse[s]);
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    plot::cluster_map(&he_map.into_values().collect::<Vec<_>>(), &a.out.join("cluster_map_he.png"))?;
    plot::cluster_map(&sim_map.into_values().collect::<Vec<_>>(), &a.out.join("cluster_map_sim.png"))?;
    info!("cluster agreement {:.3}", detail.report.agreement);
    Ok(json!({
        "n_components": detail.report.n_components,
        "agreement": detail.report.agreement,
        "mean_matched_cosine": detail.report.mean_matched_cosine,
        "matching": detail.matching,
        "he_assignments": detail.he_labels,
        "sim_assignments": detail.sim_labels,
        "he_prototypes": detail.he_prototypes,
        "sim_prototypes": detail.sim_prototypes,
    }))
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    /// Repeated slide splits per MIL evaluation.
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn variant_dir(v: Variant) -> &'static str {
    match v {
        Variant::SimOnly => "sim-only",
        Variant::Joint1 => "joint-1",
        Variant::Dann => "dann",
        Variant::Nce => "nce",
        Variant::Recon => "recon",
    }
}

pub fn ablation(a: &AblationArgs) -> CliResult<()> {
    check_corpus(&a.corpus)?;
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one value".into()));
    }
    let config = config_or_default(a.config.as_deref())?;
    if config.stages.len() != 4 {
        return Err(CliError::Usage("the ablation needs a four-stage config".into()));
    }
    prepare_output(&a.out, a.force)?;
    RunDirectory::new(&a.out).write_config(&config)?;
    let corpus = load_corpus(&a.corpus)?;
    let eval = EvalConfig {
        mil_repeats: a.repeats,
        ..Default::default()
    };
    let mut rows: Vec<AblationRow> = Vec::new();
    for &seed in &a.seeds {
        info!("seed {seed}");
        let seed_dir = a.out.join(format!("seed{seed}"));
        let mut sinks: BTreeMap<Variant, TraceSink> = BTreeMap::new();
        for v in Variant::ALL {
            let dir = seed_dir.join(variant_dir(v));
            fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        let joint_trace = seed_dir.join("trace_joint.csv");
        let mut on_step = |v: Variant, row: &TraceRow| {
            let path = if v == Variant::SimOnly {
                seed_dir.join("trace_sim_only.csv")
            } else {
                joint_trace.clone()
            };
            let key = if v == Variant::SimOnly { v } else { Variant::Joint1 };
            sinks.entry(key).or_insert_with(|| TraceSink::new(path)).push(row);
        };
        let mut failure: Option<CliError> = None;
        let mut on_checkpoint = |v: Variant, ck: &Checkpoint, records: &[EmbeddingRecord], report: &EvalReport| {
            let dir = seed_dir.join(variant_dir(v));
            let saved = RunDirectory::new(&dir)
                .save_checkpoint(ck)
                .and_then(|_| write_json(&dir.join(REPORT_FILE), report))
                .and_then(|_| write_embeddings(&dir.join("embeddings"), records).map_err(CliError::from));
            if let Err(e) = saved {
                let msg = e.to_string();
                failure.get_or_insert(e);
                return Err(Error::Training(msg));
            }
            let row = AblationRow::from_report(v, seed, report);
            info!(
                "{v}: probe {:.3} recall@1 {:.3} mil {:.3} agreement {:.3}",
                row.domain_probe_acc, row.recall_at_1, row.mil_acc, row.cluster_agreement
            );
            Ok(())
        };
        let result = run_ablation_seed(
            &config,
            &corpus,
            &a.corpus,
            &eval,
            seed,
            &Variant::ALL,
            &mut on_step,
            &mut on_checkpoint,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        rows.extend(result?);
        for sink in sinks.values_mut() {
            sink.flush()?;
        }
    }

    let table = a.out.join("ablation.csv");
    let file = fs::File::create(&table).map_err(|e| CliError::io(&table, e))?;
    write_table(file, &rows)?;
    let medians = summarize(&rows);
    write_json(&a.out.join("medians.json"), &medians)?;
    let mut keyed: BTreeMap<String, BTreeMap<String, &AblationRow>> = BTreeMap::new();
    for r in &rows {
        keyed
            .entry(format!("seed{}", r.seed))
            .or_default()
            .insert(format!("stage{}:{}", r.variant.stage(), r.variant), r);
    }
    write_json(&a.out.join("metrics.json"), &keyed)?;
    println!("{:<9} {:>6} {:>9} {:>8} {:>8} {:>9}", "row", "probe", "recall@1", "mil_acc", "agree", "composite");
    for m in &medians {
        println!(
            "{:<9} {:>6.3} {:>9.3} {:>8.3} {:>8.3} {:>9.3}",
            m.variant.as_str(),
            m.domain_probe_acc,
            m.recall_at_1,
            m.mil_acc,
            m.cluster_agreement,
            m.sim_composite
        );
    }
    Ok(())
}
