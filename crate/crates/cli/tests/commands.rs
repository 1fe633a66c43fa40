use std::path::Path;
use std::process::Command as Process;

use blindrec::agents::{simulate_annotations, AnnotationRecord, PersonaProfile, RationaleSummary};
use blindrec::io::{jsonl, lfsa};
use blindrec_cli::commands::{annotator_seed, load_data};
use blindrec_cli::{run, Cli, Layout, RunConfig};
use clap::Parser;

const MICRO: &str = r#"
run_id = "micro"
seed = 5
[data.synthetic]
user_count = 100
item_count = 60
interactions_per_user = 12
[agents]
embed_dim = 32
workers = 3
[train]
dim = 8
lr = 0.01
pretrain_epochs = 15
stage1_epochs = 10
stage2_epochs = 5
[eval]
strategies = ["random", "kmeans", "llm-mv"]
"#;

fn setup(extra: &str) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, format!("{MICRO}{extra}")).unwrap();
    let p = path.to_str().unwrap().to_string();
    (dir, p)
}

fn cli(config: &str, out: &Path, args: &[&str]) -> Cli {
    let mut argv = vec!["blindrec", "--config", config, "--out", out.to_str().unwrap()];
    argv.extend_from_slice(args);
    Cli::parse_from(argv)
}

fn exec(config: &str, out: &Path, args: &[&str]) -> Result<(), i32> {
    run(&cli(config, out, args)).map_err(|e| e.exit_code())
}

#[test]
fn personas_are_deterministic_and_guarded() {
    let (dir, cfg) = setup("");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    exec(&cfg, &a, &["personas", "--n", "4"]).unwrap();
    exec(&cfg, &b, &["personas", "--n", "4"]).unwrap();
    let la = Layout::new(&a);
    let pa: Vec<PersonaProfile> = jsonl::read(&la.personas()).unwrap();
    assert_eq!(pa.len(), 4);
    assert_eq!(std::fs::read(la.personas()).unwrap(), std::fs::read(Layout::new(&b).personas()).unwrap());
    assert_eq!(lfsa::read(&la.persona_embeddings()).unwrap().dim(), (4, 32));

    assert_eq!(exec(&cfg, &a, &["personas"]), Err(3));
    exec(&cfg, &a, &["--force", "personas", "--n", "10"]).unwrap();
    assert_eq!(jsonl::read::<PersonaProfile>(&la.personas()).unwrap().len(), 10);
}

#[test]
fn annotate_has_full_cardinality_and_resumes() {
    let (dir, cfg) = setup("");
    let full = dir.path().join("full");
    exec(&cfg, &full, &["personas"]).unwrap();
    exec(&cfg, &full, &["annotate"]).unwrap();
    let path = Layout::new(&full).annotations();
    let records: Vec<AnnotationRecord> = jsonl::read(&path).unwrap();
    assert_eq!(records.len(), 400);

    // Simulate an interruption: keep the first 150 lines, then resume.
    let text = std::fs::read_to_string(&path).unwrap();
    let head: String = text.lines().take(150).map(|l| format!("{l}\n")).collect();
    std::fs::write(&path, head).unwrap();
    exec(&cfg, &full, &["annotate"]).unwrap();
    let mut resumed: Vec<AnnotationRecord> = jsonl::read(&path).unwrap();
    resumed.sort_by_key(|r| (r.user, r.annotator));
    let mut original = records.clone();
    original.sort_by_key(|r| (r.user, r.annotator));
    assert_eq!(resumed, original);

    // A complete file means nothing left to fetch.
    exec(&cfg, &full, &["annotate"]).unwrap();
    assert_eq!(jsonl::read::<AnnotationRecord>(&path).unwrap().len(), 400);
}

#[test]
fn simulated_annotations_replay_the_oracle() {
    let (dir, cfg_path) = setup("");
    let out = dir.path().join("sim");
    exec(&cfg_path, &out, &["--backend", "simulated", "personas"]).unwrap();
    exec(&cfg_path, &out, &["--backend", "simulated", "annotate"]).unwrap();
    let mut records: Vec<AnnotationRecord> = jsonl::read(&Layout::new(&out).annotations()).unwrap();
    records.sort_by_key(|r| (r.user, r.annotator));

    let cfg = RunConfig::load(Path::new(&cfg_path)).unwrap();
    let truth = load_data(&cfg).unwrap().truth.unwrap();
    let planted = cfg.agents.planted_confusions(2).unwrap();
    let oracle = simulate_annotations(&truth, &planted, &cfg.schema().unwrap(), annotator_seed(cfg.seed)).unwrap();
    let labels: Vec<_> = records.iter().map(|r| (r.user, r.annotator, r.label)).collect();
    let expected: Vec<_> = oracle.iter().map(|r| (r.user, r.annotator, r.label)).collect();
    assert_eq!(labels, expected);
}

#[test]
fn summarize_cardinality_resumability_and_determinism() {
    let (dir, cfg) = setup("");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        exec(&cfg, out, &["--backend", "simulated", "personas"]).unwrap();
        exec(&cfg, out, &["--backend", "simulated", "annotate"]).unwrap();
        exec(&cfg, out, &["--backend", "simulated", "summarize"]).unwrap();
    }
    let la = Layout::new(&a);
    let sums: Vec<RationaleSummary> = jsonl::read(&la.summaries()).unwrap();
    assert_eq!(sums.len(), 100);
    assert_eq!(std::fs::read(la.summaries()).unwrap(), std::fs::read(Layout::new(&b).summaries()).unwrap());
    assert_eq!(lfsa::read(&la.rationale_embeddings()).unwrap().dim(), (100, 32));

    let text = std::fs::read_to_string(la.summaries()).unwrap();
    let head: String = text.lines().take(40).map(|l| format!("{l}\n")).collect();
    std::fs::write(la.summaries(), head).unwrap();
    exec(&cfg, &a, &["--backend", "simulated", "summarize"]).unwrap();
    let mut resumed: Vec<RationaleSummary> = jsonl::read(&la.summaries()).unwrap();
    resumed.sort_by_key(|s| s.user);
    let mut original = sums;
    original.sort_by_key(|s| s.user);
    assert_eq!(resumed, original);
    assert_eq!(
        std::fs::read(la.rationale_embeddings()).unwrap(),
        std::fs::read(Layout::new(&b).rationale_embeddings()).unwrap()
    );
}

#[test]
fn summarize_skips_users_with_missing_annotations() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("partial");
    exec(&cfg, &out, &["personas"]).unwrap();
    exec(&cfg, &out, &["annotate"]).unwrap();
    let path = Layout::new(&out).annotations();
    let kept: Vec<AnnotationRecord> = jsonl::read::<AnnotationRecord>(&path).unwrap().into_iter().filter(|r| r.user != 7).collect();
    jsonl::write(&path, &kept).unwrap();
    exec(&cfg, &out, &["summarize"]).unwrap();
    let sums: Vec<RationaleSummary> = jsonl::read(&Layout::new(&out).summaries()).unwrap();
    assert_eq!(sums.len(), 99);
    assert!(sums.iter().all(|s| s.user != 7));
    // Stage 1 needs a rationale for every user.
    exec(&cfg, &out, &["train", "pretrain"]).unwrap();
    assert_eq!(exec(&cfg, &out, &["train", "stage1"]), Err(4));
}

#[test]
fn missing_prerequisites_exit_4() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("empty");
    assert_eq!(exec(&cfg, &out, &["annotate"]), Err(4));
    assert_eq!(exec(&cfg, &out, &["summarize"]), Err(4));
    assert_eq!(exec(&cfg, &out, &["train", "stage1"]), Err(4));
    assert_eq!(exec(&cfg, &out, &["train", "stage2"]), Err(4));
    exec(&cfg, &out, &["train", "pretrain"]).unwrap();
    assert_eq!(exec(&cfg, &out, &["train", "stage2"]), Err(4));
    assert_eq!(exec(&cfg, &out, &["evaluate"]), Err(4));
}

#[test]
fn nofair_baseline_path_evaluates_the_user_table() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("nofair");
    exec(&cfg, &out, &["train", "pretrain"]).unwrap();
    exec(&cfg, &out, &["evaluate", "--embedding", "user"]).unwrap();
    let csv = std::fs::read_to_string(Layout::new(&out).metrics()).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.starts_with("micro,mf,user.")));
    assert_eq!(exec(&cfg, &out, &["evaluate", "--embedding", "user"]), Err(3));
    // Label quality without annotations keeps the non-agent strategies.
    let lq = std::fs::read_to_string(Layout::new(&out).label_quality()).unwrap();
    assert_eq!(lq.lines().count(), 3);
}

#[test]
fn pipeline_is_deterministic_and_reports_every_metric() {
    let (dir, cfg) = setup("");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    exec(&cfg, &a, &["--backend", "simulated", "pipeline"]).unwrap();
    exec(&cfg, &b, &["--backend", "simulated", "pipeline"]).unwrap();
    let (la, lb) = (Layout::new(&a), Layout::new(&b));
    let ma = std::fs::read(la.metrics()).unwrap();
    assert_eq!(ma, std::fs::read(lb.metrics()).unwrap());
    let csv = String::from_utf8(ma).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "run_id,backbone,metric,k,value,seed");
    // Five metrics for each of the two embeddings.
    assert_eq!(csv.lines().count() - 1, 10);
    let (x, y) = (la.checkpoint("stage2"), lb.checkpoint("stage2"));
    assert_eq!(std::fs::read(x.join("weights.bin")).unwrap(), std::fs::read(y.join("weights.bin")).unwrap());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(la.manifest()).unwrap()).unwrap();
    assert_eq!(manifest["metrics"].as_array().unwrap().len(), 10);
    for stage in ["pretrain", "stage1", "stage2"] {
        assert!(manifest["checkpoints"][stage].is_string(), "{stage}");
    }
    let stage2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(la.checkpoint("stage2").join("manifest.json")).unwrap()).unwrap();
    assert_eq!(stage2["meta"]["stage1_sha256"], manifest["checkpoints"]["stage1"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(la.attack_report("preference")).unwrap()).unwrap();
    for key in ["auc", "n_train", "n_test", "seed", "embedding_file"] {
        assert!(!report[key].is_null(), "{key}");
    }
    for i in 0..4 {
        assert!(la.confusion(i).exists());
    }
}

#[test]
fn binary_exit_codes() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("bin");
    let bin = env!("CARGO_BIN_EXE_blindrec");
    let status = |args: &[&str]| {
        Process::new(bin)
            .args(["--config", &cfg, "--out", out.to_str().unwrap()])
            .args(args)
            .env("RUST_LOG", "error")
            .status()
            .unwrap()
            .code()
    };
    assert_eq!(status(&["personas"]), Some(0));
    assert_eq!(status(&["personas"]), Some(3));
    assert_eq!(status(&["train", "stage2"]), Some(4));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "unknown_key = 1\n").unwrap();
    let code = Process::new(bin)
        .args(["--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap(), "annotate"])
        .env("RUST_LOG", "error")
        .status()
        .unwrap()
        .code();
    assert_eq!(code, Some(5));
    // The HTTP backend fails at transport level when nothing listens.
    let code = Process::new(bin)
        .args(["--config", &cfg, "--out", dir.path().join("http").to_str().unwrap(), "--backend", "http", "personas"])
        .env("RUST_LOG", "error")
        .env("BLINDREC_LLM_URL", "http://127.0.0.1:9/v1/chat/completions")
        .env("BLINDREC_LLM_MODEL", "none")
        .status()
        .unwrap()
        .code();
    assert_eq!(code, Some(2));
}
