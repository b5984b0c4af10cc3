//! End-to-end command tests against the built binary.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use hmid_core::encoders::checkpoint::{save, CheckpointMeta};
use hmid_core::encoders::{EncoderConfig, Model};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hmid"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hmid-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> Output {
    cmd.env("HMID_LOG", "error").output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small tower config matching a 16px corpus, written as a config file.
fn write_config(dir: &PathBuf) -> PathBuf {
    let path = dir.join("train.cfg");
    fs::write(
        &path,
        "\
# tiny desk config
image_size = 16
patch_size = 8
width = 16
embed_dim = 16
heads = 2
depth = 1
batch_size = 8
max_iters = 6
log_every = 3
",
    )
    .unwrap();
    path
}

/// A gate-passing frozen teacher checkpoint without the training cost.
fn plant_teacher(dir: &PathBuf) -> PathBuf {
    let config = EncoderConfig {
        embed_dim: 16,
        width: 32,
        depth: 1,
        heads: 2,
        patch_size: 8,
        vocab_size: 256,
        max_text_len: 16,
        image_size: 16,
    };
    let mut teacher: Model<f32> = Model::new(config.clone(), 7).unwrap();
    teacher.freeze();
    let path = dir.join("teacher.ckpt");
    save(
        &path,
        &teacher,
        &CheckpointMeta {
            config,
            frozen: true,
            role: "teacher".into(),
            val_recall_at_1: Some(0.95),
            seed: 7,
        },
    )
    .unwrap();
    path
}

#[test]
fn gen_data_then_distill_produces_artifacts() {
    let dir = workdir("pipeline");
    let corpus = dir.join("corpus");
    assert_ok(&run(bin().args([
        "gen-data",
        "--n",
        "48",
        "--seed",
        "7",
        "--image-size",
        "16",
        "--out",
        corpus.to_str().unwrap(),
    ])));
    assert!(corpus.join("manifest.jsonl").exists());
    assert!(corpus.join("images/00000.ppm").exists());

    let config = write_config(&dir);
    let teacher = plant_teacher(&dir);
    let out = dir.join("student");
    assert_ok(&run(bin().args([
        "distill",
        "--config",
        config.to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--teacher",
        teacher.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ])));
    assert!(out.join("final.ckpt").exists());
    assert!(out.join("best.ckpt").exists());
    assert!(out.join("metrics.jsonl").exists());

    // Evaluation commands accept the produced checkpoint.
    let ckpt = out.join("final.ckpt");
    let retrieval_json = dir.join("retrieval.json");
    assert_ok(&run(bin().args([
        "eval-retrieve",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--out",
        retrieval_json.to_str().unwrap(),
    ])));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&retrieval_json).unwrap()).unwrap();
    assert_eq!(json["task"], "retrieval");
    assert!(json["metrics"]["image_to_text"].is_array());
    assert!(json["config_hash"].is_string());

    let classify_json = dir.join("classify.json");
    assert_ok(&run(bin().args([
        "eval-classify",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--out",
        classify_json.to_str().unwrap(),
    ])));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&classify_json).unwrap()).unwrap();
    assert_eq!(json["task"], "zero-shot-classify");

    let traverse_txt = dir.join("traverse.txt");
    let out_run = run(bin().args([
        "traverse",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--count",
        "2",
        "--steps",
        "10",
        "--out",
        traverse_txt.to_str().unwrap(),
    ]));
    assert_ok(&out_run);
    let text = fs::read_to_string(&traverse_txt).unwrap();
    assert_eq!(text.trim().lines().count(), 2);
}

#[test]
fn distill_refuses_unmeasured_or_weak_teacher() {
    let dir = workdir("gate");
    let corpus = dir.join("corpus");
    assert_ok(&run(bin().args([
        "gen-data",
        "--n",
        "24",
        "--seed",
        "1",
        "--image-size",
        "16",
        "--out",
        corpus.to_str().unwrap(),
    ])));
    let config = write_config(&dir);

    // Weak teacher: recall below the gate.
    let weak = {
        let cfg = EncoderConfig {
            embed_dim: 16,
            width: 32,
            depth: 1,
            heads: 2,
            patch_size: 8,
            vocab_size: 256,
            max_text_len: 16,
            image_size: 16,
        };
        let mut t: Model<f32> = Model::new(cfg.clone(), 7).unwrap();
        t.freeze();
        let path = dir.join("weak.ckpt");
        save(
            &path,
            &t,
            &CheckpointMeta {
                config: cfg,
                frozen: true,
                role: "teacher".into(),
                val_recall_at_1: Some(0.4),
                seed: 7,
            },
        )
        .unwrap();
        path
    };
    let out = run(bin().args([
        "distill",
        "--config",
        config.to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--teacher",
        weak.to_str().unwrap(),
        "--out",
        dir.join("student").to_str().unwrap(),
    ]));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "stderr: {err}");
    assert!(err.contains("gate"), "stderr: {err}");
}

#[test]
fn unknown_flag_exits_two() {
    let out = bin()
        .args(["gen-data", "--definitely-not-a-flag", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_parse_error_exits_three_with_line() {
    let dir = workdir("badcfg");
    let corpus = dir.join("corpus");
    assert_ok(&run(bin().args([
        "gen-data",
        "--n",
        "12",
        "--seed",
        "1",
        "--image-size",
        "16",
        "--out",
        corpus.to_str().unwrap(),
    ])));
    let config = dir.join("bad.cfg");
    fs::write(&config, "batch_size = 8\nthis line is wrong\n").unwrap();
    let out = run(bin().args([
        "train-meru",
        "--config",
        config.to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--out",
        dir.join("x").to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "stderr: {err}");
}

#[test]
fn ablate_loss_emits_four_rows() {
    let dir = workdir("ablate");
    let corpus = dir.join("corpus");
    assert_ok(&run(bin().args([
        "gen-data",
        "--n",
        "36",
        "--seed",
        "2",
        "--image-size",
        "16",
        "--out",
        corpus.to_str().unwrap(),
    ])));
    let config = write_config(&dir);
    let teacher = plant_teacher(&dir);
    let out = run(bin().args([
        "ablate-loss",
        "--config",
        config.to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--teacher",
        teacher.to_str().unwrap(),
        "--out",
        dir.join("runs").to_str().unwrap(),
        "--iters",
        "4",
    ]));
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = stdout
        .lines()
        .filter(|l| l.starts_with('x') || l.starts_with('-'))
        .collect();
    assert_eq!(rows.len(), 4, "stdout:\n{stdout}");
    // Header mirrors the loss-combination grid.
    assert!(stdout.contains("contrastive"));
    assert!(stdout.contains("entailment"));
    assert!(stdout.contains("distillation"));
}

#[test]
fn ablate_mask_emits_the_four_ratio_rows() {
    let dir = workdir("ablate-mask");
    let corpus = dir.join("corpus");
    assert_ok(&run(bin().args([
        "gen-data",
        "--n",
        "48",
        "--seed",
        "4",
        "--image-size",
        "16",
        "--out",
        corpus.to_str().unwrap(),
    ])));
    let config = write_config(&dir);
    let out = run(bin().args([
        "ablate-mask",
        "--config",
        config.to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--out",
        dir.join("runs").to_str().unwrap(),
        "--iters",
        "2",
    ]));
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for ratio in ["0%", "25%", "50%", "75%"] {
        assert!(stdout.contains(ratio), "missing row {ratio}:\n{stdout}");
    }
}

#[test]
fn grad_check_passes_and_gates() {
    let out = run(bin().args(["grad-check", "--reps", "3"]));
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("loss_total"));
    assert!(stdout.contains("ok"));

    // An absurd tolerance must fail with a nonzero exit.
    let out = run(bin().args(["grad-check", "--reps", "2", "--tol", "1e-30"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn same_seed_reproduces_checkpoint_bytes() {
    let dir = workdir("repro");
    let corpus = dir.join("corpus");
    assert_ok(&run(bin().args([
        "gen-data",
        "--n",
        "24",
        "--seed",
        "5",
        "--image-size",
        "16",
        "--out",
        corpus.to_str().unwrap(),
    ])));
    let config = write_config(&dir);
    for tag in ["a", "b"] {
        assert_ok(&run(bin().args([
            "train-meru",
            "--config",
            config.to_str().unwrap(),
            "--data",
            corpus.to_str().unwrap(),
            "--out",
            dir.join(tag).to_str().unwrap(),
            "--seed",
            "11",
        ])));
    }
    assert_eq!(
        fs::read(dir.join("a/final.ckpt")).unwrap(),
        fs::read(dir.join("b/final.ckpt")).unwrap()
    );
}
