use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use xmodal_core::curriculum::{Checkpoint, CurriculumConfig};

fn xmodal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmodal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A tiny corpus and a config small enough to train in seconds.
fn fixture(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let corpus = root.join("corpus");
    let out = xmodal(&["synth", "--slides", "4", "--patches", "6", "--seed", "3", "--size", "32", "--out", p(&corpus)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut cfg = CurriculumConfig::default();
    cfg.batch_size = 2;
    cfg.encoder.image_size = 32;
    cfg.encoder.width = 32;
    cfg.encoder.embed_dim = 32;
    cfg.encoder.depth = 1;
    cfg.encoder.heads = 2;
    cfg.encoder.proj_dim_dino = 16;
    cfg.encoder.proj_dim_contrast = 8;
    cfg.encoder.domain_hidden = 16;
    cfg.views.global_size = 32;
    cfg.views.local_size = 16;
    for s in cfg.stages.iter_mut() {
        s.steps = 2;
    }
    let path = root.join("config.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    (corpus, path)
}

#[test]
fn synth_writes_the_requested_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    let out = xmodal(&["synth", "--slides", "3", "--patches", "4", "--seed", "1", "--out", p(&corpus)]);
    assert_eq!(code(&out), 0);
    let manifest = fs::read_to_string(corpus.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 12);
    assert_eq!(fs::read_dir(corpus.join("slide_000")).unwrap().count(), 8);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&xmodal(&["synth", "--slides", "3"])), 2);
    assert_eq!(code(&xmodal(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let d = p(dir.path());
    assert_eq!(code(&xmodal(&["eval", "--checkpoint", d, "--corpus", d, "--task", "umap", "--out", d])), 2);
    assert_eq!(code(&xmodal(&["pretrain", "--corpus", d, "--out", d, "--through-stage", "5"])), 2);
}

#[test]
fn non_empty_output_is_refused_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    let args = ["synth", "--slides", "2", "--patches", "2", "--size", "32", "--out", p(&corpus)];
    assert_eq!(code(&xmodal(&args)), 0);
    let before = fs::read(corpus.join("manifest.jsonl")).unwrap();
    let again = xmodal(&args);
    assert_eq!(code(&again), 3);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(fs::read(corpus.join("manifest.jsonl")).unwrap(), before);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&xmodal(&forced)), 0);
}

#[test]
fn runtime_failures_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = xmodal(&["pretrain", "--corpus", p(&dir.path().join("nowhere")), "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&out), 4);
}

#[test]
fn pretrain_stops_after_the_requested_stage_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, config) = fixture(dir.path());
    let run = dir.path().join("run");
    let base = ["pretrain", "--config", p(&config), "--corpus", p(&corpus), "--out", p(&run)];
    let mut one = base.to_vec();
    one.extend(["--through-stage", "1"]);
    let out = xmodal(&one);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("stage1.ckpt").is_file());
    assert!(!run.join("stage2.ckpt").exists());
    assert!(run.join("config.toml").is_file());

    let mut resume = base.to_vec();
    resume.extend(["--through-stage", "4", "--resume"]);
    let out = xmodal(&resume);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for k in 1..=4 {
        let ck = Checkpoint::load(&run.join(format!("stage{k}.ckpt"))).unwrap();
        assert_eq!(ck.stage_id, k);
        assert_eq!(ck.step, 2 * k as u64);
    }
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 8);

    // nothing left to do
    assert_eq!(code(&xmodal(&resume)), 4);

    // a straight run gives the same trace as the interrupted one
    let straight = dir.path().join("straight");
    let out = xmodal(&["pretrain", "--config", p(&config), "--corpus", p(&corpus), "--out", p(&straight)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_to_string(straight.join("trace.csv")).unwrap(), trace);
    assert_eq!(
        fs::read(straight.join("stage4.ckpt")).unwrap(),
        fs::read(run.join("stage4.ckpt")).unwrap()
    );
}

#[test]
fn eval_tasks_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, config) = fixture(dir.path());
    let run = dir.path().join("run");
    let out = xmodal(&["pretrain", "--config", p(&config), "--corpus", p(&corpus), "--out", p(&run), "--through-stage", "2"]);
    assert_eq!(code(&out), 0);
    let ck = run.join("stage2.ckpt");
    let report = |task: &str, extra: &[&str]| -> serde_json::Value {
        let out_dir = dir.path().join(format!("eval_{task}"));
        let mut args = vec!["eval", "--checkpoint", p(&ck), "--corpus", p(&corpus), "--task", task, "--out", p(&out_dir)];
        args.extend(extra);
        let out = xmodal(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap()
    };

    let align = report("align", &[]);
    for key in ["domain_probe_acc", "recall_at_1", "recall_at_5"] {
        assert!(align[key].as_f64().unwrap() >= 0.0, "{key}");
    }
    assert!(dir.path().join("eval_align/projection.csv").is_file());
    assert!(dir.path().join("eval_align/projection_modality.png").is_file());

    let mil = report("mil", &["--repeats", "2"]);
    for m in ["he", "sim"] {
        assert_eq!(mil[m]["splits"].as_array().unwrap().len(), 2);
        assert!(mil[m]["splits"][0]["accuracy"].is_number());
        assert!(mil[m]["splits"][0].get("auc").is_some());
    }

    let cluster = report("cluster", &["--components", "3"]);
    assert_eq!(cluster["he_assignments"].as_array().unwrap().len(), 24);
    assert_eq!(cluster["sim_assignments"].as_array().unwrap().len(), 24);
    assert!(cluster["agreement"].as_f64().unwrap() <= 1.0);
    assert!(dir.path().join("eval_cluster/cluster_map_sim.png").is_file());
}
