mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use common::tiny_run_config;
use idfusion::cli::{TrainSummary, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};
use idfusion::eval::MetricReport;
use idfusion::inference::Provenance;
use idfusion::train::read_loss_csv;

fn idfusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idfusion"))
        .args(args)
        .env_remove("IDFUSION_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let out = idfusion(args);
    assert_eq!(code(&out), EXIT_OK, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny end-to-end workspace: config, dataset, base and trained checkpoint.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    checkpoint: PathBuf,
}

fn workspace() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.toml");
        std::fs::write(&config, tiny_run_config().to_toml()).unwrap();
        let data = root.join("data");
        let base = root.join("base.ckpt");
        let checkpoint = root.join("trained.ckpt");
        ok(&["--config", s(&config), "synth-data", "--out", s(&data)]);
        ok(&["--config", s(&config), "pretrain", "--out", s(&base)]);
        ok(&[
            "--config", s(&config), "train", "--data", s(&data), "--base", s(&base), "--out", s(&checkpoint),
        ]);
        Workspace { _dir: dir, root, config, data, checkpoint }
    })
}

#[test]
fn train_writes_checkpoint_loss_csv_and_summary() {
    let ws = workspace();
    let steps = tiny_run_config().train.steps;
    let trace = read_loss_csv(&ws.checkpoint.with_extension("loss.csv")).unwrap();
    assert_eq!(trace.len(), steps);
    let summary: TrainSummary =
        serde_json::from_slice(&std::fs::read(ws.checkpoint.with_extension("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.steps, steps);
    assert_eq!(summary.config_digest, tiny_run_config().digest());
    assert_eq!(summary.text_cross_grad_max_abs, 0.0);
    let manifest = std::fs::read_to_string(ws.data.join("manifest.json")).unwrap();
    assert!(manifest.contains(&tiny_run_config().digest()));
}

#[test]
fn same_seed_gives_byte_identical_images() {
    let ws = workspace();
    let face = ws.data.join(idfusion::synth::SyntheticDataset::file_name(0, 0));
    let gen = |name: &str, seed: &str| {
        let out = ws.root.join(name);
        ok(&[
            "generate", "--checkpoint", s(&ws.checkpoint), "--prompt", "a face with red hair",
            "--id-image", s(&face), "--seed", seed, "--out", s(&out),
        ]);
        out
    };
    let (a, b, c) = (gen("a.png", "3"), gen("b.png", "3"), gen("c.png", "4"));
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
    let prov: Provenance = serde_json::from_slice(&bytes(&a.with_extension("json"))).unwrap();
    assert_eq!(prov.seed, 3);
    assert_eq!(prov.config_digest, tiny_run_config().digest());
    assert_eq!(prov.steps, tiny_run_config().inference.steps);
}

#[test]
fn request_files_and_flag_overrides() {
    let ws = workspace();
    let req = ws.root.join("req.json");
    let face = idfusion::synth::SyntheticDataset::file_name(1, 0);
    std::fs::copy(ws.data.join(&face), ws.root.join(&face)).unwrap();
    std::fs::write(
        &req,
        format!(r#"{{"prompt": "a face with blue hair", "id_images": ["{face}"], "seed": 5, "variant": "mutual_attention"}}"#),
    )
    .unwrap();
    let out = ws.root.join("req.png");
    ok(&["generate", "--checkpoint", s(&ws.checkpoint), "--request", s(&req), "--no-merge", "--out", s(&out)]);
    let prov: Provenance = serde_json::from_slice(&std::fs::read(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(prov.seed, 5);
    assert_eq!(prov.variant, idfusion::inference::Variant::MutualAttention);
    assert!(!prov.merge_cross_attention);

    std::fs::write(&req, r#"{"prompt": "x", "colour": "red"}"#).unwrap();
    let bad = idfusion(&["generate", "--checkpoint", s(&ws.checkpoint), "--request", s(&req), "--out", s(&out)]);
    assert_eq!(code(&bad), EXIT_VALIDATION);
}

#[test]
fn evaluate_writes_reports() {
    let ws = workspace();
    let manifest = ws.root.join("eval.jsonl");
    let lines: Vec<String> = (0..2)
        .map(|i| {
            let f = ws.data.join(idfusion::synth::SyntheticDataset::file_name(i, 1));
            let r = ws.data.join(idfusion::synth::SyntheticDataset::file_name(i, 0));
            format!(r#"{{"generated": "{}", "reference": "{}", "prompt": "a face", "method": "m{i}"}}"#, s(&f), s(&r))
        })
        .collect();
    std::fs::write(&manifest, lines.join("\n")).unwrap();
    let out = ws.root.join("report");
    ok(&["--config", s(&ws.config), "evaluate", "--manifest", s(&manifest), "--out", s(&out)]);
    let report: MetricReport = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.config_digest.as_deref(), Some(tiny_run_config().digest().as_str()));
    assert_eq!(report.records.len(), 2);
    assert!(report.methods.iter().all(|m| m.fused_identity.is_some()));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn validation_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nimage_size = 16\nwidth = 3\n").unwrap();
    let out = idfusion(&["--config", s(&cfg), "synth-data", "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&out), EXIT_VALIDATION);
    assert!(!out.stderr.is_empty());

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = idfusion(&["evaluate", "--manifest", s(&empty), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&out), EXIT_VALIDATION);

    assert_eq!(code(&idfusion(&["train"])), EXIT_VALIDATION);
    assert_eq!(code(&idfusion(&["frobnicate"])), EXIT_VALIDATION);
    assert_eq!(code(&idfusion(&["--help"])), EXIT_OK);
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = idfusion(&["generate", "--checkpoint", s(&missing), "--prompt", "a face", "--out", s(&dir.path().join("o.png"))]);
    assert_eq!(code(&out), EXIT_RUNTIME);
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = idfusion(&["generate", "--checkpoint", s(&garbage), "--prompt", "a face", "--out", s(&dir.path().join("o.png"))]);
    assert_ne!(code(&out), EXIT_OK);
}
