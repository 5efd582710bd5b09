//! End-to-end tests driving the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_weft")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A small config all tests share: tiny network, two records, short runs.
const TEST_CONFIG: &str = "\
[model]
base_channels = 8

[data]
size = 2

[train]
batch_size = 2
max_steps = 10

[sampler]
steps = 3
";

fn write_config(dir: &Path) -> String {
    let path = dir.join("toy.toml");
    fs::write(&path, TEST_CONFIG).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_writes_checkpoint_log_and_snapshot() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("train");
    let out = run(&[
        "train",
        "--config",
        &cfg,
        "--overrides",
        "stage=1",
        "max_steps=10",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);

    assert!(out_dir.join("checkpoint.weft").is_file());
    assert!(out_dir.join("resolved.toml").is_file());
    assert!(out_dir.join("run.json").is_file());

    let log = fs::read_to_string(out_dir.join("train_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 10, "one JSON line per training step");
    for line in &lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
        assert_eq!(v["stage"], 1);
    }

    // Runtime logs are line-delimited JSON on stderr.
    for line in String::from_utf8_lossy(&out.stderr).lines() {
        if !line.trim().is_empty() {
            serde_json::from_str::<serde_json::Value>(line)
                .unwrap_or_else(|e| panic!("stderr line is not JSON ({e}): {line}"));
        }
    }

    // The resolved snapshot is itself a loadable config.
    let reuse = run(&[
        "train",
        "--config",
        out_dir.join("resolved.toml").to_str().unwrap(),
        "--overrides",
        "max_steps=1",
        "--out",
        dir.path().join("train2").to_str().unwrap(),
    ]);
    assert_exit(&reuse, 0);
}

#[test]
fn tryon_is_byte_identical_for_a_fixed_seed() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out_dir in [&out_a, &out_b] {
        let out = run(&[
            "tryon",
            "--config",
            &cfg,
            "--seed",
            "7",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_exit(&out, 0);
    }
    let a = fs::read(out_a.join("tryon_000.png")).unwrap();
    let b = fs::read(out_b.join("tryon_000.png")).unwrap();
    assert_eq!(a, b, "fixed seed must reproduce the image bit for bit");

    let ra = fs::read(out_a.join("responses.jsonl")).unwrap();
    let rb = fs::read(out_b.join("responses.jsonl")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn tryon_responses_feed_evaluate_and_report() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path());
    let tryon_dir = dir.path().join("tryon");
    let out = run(&[
        "tryon",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--out",
        tryon_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);

    let report_md = dir.path().join("report.md");
    let out = run(&[
        "evaluate",
        "--manifest",
        tryon_dir.join("responses.jsonl").to_str().unwrap(),
        "--out",
        report_md.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);

    let md = fs::read_to_string(&report_md).unwrap();
    assert!(md.contains("| tryon |"), "method row present: {md}");
    assert!(md.contains("ssim") && md.contains("dino_m"), "{md}");
    assert!(md.contains("**"), "best value is bolded: {md}");

    // The raw report next to it re-renders, with a study attached.
    let study_path = dir.path().join("study.jsonl");
    fs::write(
        &study_path,
        concat!(
            "{\"respondent_id\":\"r1\",\"aspect\":\"quality\",\"ranking\":[\"tryon\"]}\n",
            "{\"respondent_id\":\"r2\",\"aspect\":\"quality\",\"ranking\":[\"tryon\"]}\n",
        ),
    )
    .unwrap();
    let report_dir = dir.path().join("rerender");
    let out = run(&[
        "report",
        "--report",
        dir.path().join("report.json").to_str().unwrap(),
        "--study",
        study_path.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let md = fs::read_to_string(report_dir.join("report.md")).unwrap();
    assert!(md.contains("### study: preference (%)"), "{md}");
    let csv = fs::read_to_string(report_dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("metric,method,value"), "{csv}");
}

#[test]
fn synthesize_is_reproducible_and_generate_consumes_its_garments() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data_a = dir.path().join("data_a");
    let data_b = dir.path().join("data_b");
    for data_dir in [&data_a, &data_b] {
        let out = run(&[
            "synthesize",
            "--config",
            &cfg,
            "--count",
            "3",
            "--seed",
            "1",
            "--out",
            data_dir.to_str().unwrap(),
        ]);
        assert_exit(&out, 0);
    }
    let ma = fs::read(data_a.join("manifest.jsonl")).unwrap();
    let mb = fs::read(data_b.join("manifest.jsonl")).unwrap();
    assert_eq!(ma, mb, "same seed, same manifest bytes");

    let text = String::from_utf8(ma).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.contains("\"person\"")));
    assert!(data_a.join("person_000.png").is_file());

    // Train and try on from the synthesized directory.
    let ckpt_dir = dir.path().join("ckpt");
    let out = run(&[
        "train",
        "--config",
        &cfg,
        "--overrides",
        "max_steps=2",
        "--data",
        data_a.to_str().unwrap(),
        "--out",
        ckpt_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);

    let requests = dir.path().join("requests.jsonl");
    let garment = data_a.join("garment_000.png");
    fs::write(
        &requests,
        format!(
            "{}\n",
            serde_json::json!({
                "garment": garment.to_str().unwrap(),
                "garment_prompt": "a garment",
                "target_prompt": "a person wearing a garment",
                "seed": 5,
            })
        ),
    )
    .unwrap();
    let gen_dir = dir.path().join("gen");
    let out = run(&[
        "generate",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt_dir.to_str().unwrap(),
        "--requests",
        requests.to_str().unwrap(),
        "--out",
        gen_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    assert!(gen_dir.join("gen_000.png").is_file());
    let responses = fs::read_to_string(gen_dir.join("responses.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(responses.lines().next().unwrap()).unwrap();
    assert_eq!(row["image"], "gen_000.png");
    assert_eq!(row["seed"], 5);
    assert!(row.get("error").is_none());
}

#[test]
fn config_mistakes_exit_two() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("out");
    let out_s = out_dir.to_str().unwrap();

    // Missing config file.
    let out = run(&["train", "--config", "no-such.toml", "--out", out_s]);
    assert_exit(&out, 2);

    // Unknown override key.
    let out = run(&["train", "--config", &cfg, "--overrides", "bogus=1", "--out", out_s]);
    assert_exit(&out, 2);

    // Stage 2 without an initial checkpoint.
    let out = run(&["train", "--config", &cfg, "--overrides", "stage=2", "--out", out_s]);
    assert_exit(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--init"), "{err}");

    // Unknown flags fail fast (clap).
    let out = run(&["train", "--config", &cfg, "--frobnicate"]);
    assert_exit(&out, 2);

    // The error event is machine-readable JSON.
    let out = run(&["evaluate", "--manifest", "no-such.jsonl", "--out", out_s]);
    assert_exit(&out, 2);
    let last = String::from_utf8_lossy(&out.stderr);
    let line = last.lines().rev().find(|l| !l.trim().is_empty()).unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["event"], "error");
    assert_eq!(v["exit"], 2);
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path());

    // A corrupt checkpoint is a runtime failure, not a config mistake.
    let bad_ckpt = dir.path().join("bad.weft");
    fs::write(&bad_ckpt, b"not a checkpoint").unwrap();
    let out = run(&[
        "tryon",
        "--config",
        &cfg,
        "--checkpoint",
        bad_ckpt.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_exit(&out, 1);
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().rev().find(|l| !l.trim().is_empty()).unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["event"], "error");
    assert_eq!(v["exit"], 1);
}
