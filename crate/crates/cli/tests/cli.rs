//! End-to-end tests of the `profitlab` binary: exit codes, artifact
//! layout, manifest integrity, and byte-identical reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_profitlab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn profitlab")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}stderr: {}",
        stdout(out),
        stderr(out)
    );
}

const TINY_MODEL: [&str; 8] = [
    "--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32",
];

fn gen_corpus(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = run(&[
        "gen-synthetic",
        "--samples",
        "60",
        "--templates",
        "2",
        "--max-arg",
        "6",
        "--seed",
        "1",
        "--out-dir",
        data.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    data
}

fn train_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    let mut args = vec!["train", "--data", data, "--out-dir", out];
    args.extend(TINY_MODEL);
    args
}

fn walk(dir: &Path, root: &Path, files: &mut Vec<String>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            walk(&path, root, files);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_str().unwrap().to_string();
            if rel != "manifest.json" {
                files.push(rel);
            }
        }
    }
}

/// The manifest must list exactly the files on disk, with true sizes
/// and content hashes.
fn verify_manifest(dir: &Path) {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(manifest["command"].is_string());
    assert!(manifest["config"].is_object());
    let artifacts = manifest["artifacts"].as_array().unwrap();
    let mut listed: Vec<String> = artifacts
        .iter()
        .map(|a| a["path"].as_str().unwrap().to_string())
        .collect();
    listed.sort();
    let mut on_disk = Vec::new();
    walk(dir, dir, &mut on_disk);
    on_disk.sort();
    assert_eq!(listed, on_disk, "manifest coverage of {}", dir.display());
    for artifact in artifacts {
        let path = artifact["path"].as_str().unwrap();
        let contents = std::fs::read(dir.join(path)).unwrap();
        assert_eq!(
            contents.len() as u64,
            artifact["bytes"].as_u64().unwrap(),
            "{path}: recorded size"
        );
        let hex: String = Sha256::digest(&contents)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(hex, artifact["sha256"].as_str().unwrap(), "{path}: hash");
    }
}

#[test]
fn help_exits_zero_for_every_command() {
    for args in [
        vec!["--help"],
        vec!["train", "--help"],
        vec!["sweep-threshold", "--help"],
        vec!["plot", "--help"],
    ] {
        let out = run(&args);
        assert_code(&out, 0);
        assert!(stdout(&out).contains("Usage"), "{args:?}");
    }
}

#[test]
fn usage_errors_exit_64() {
    for args in [
        vec![],
        vec!["frobnicate"],
        vec!["train", "--no-such-flag", "1"],
        vec!["plot", "--kind", "density"],
    ] {
        let out = run(&args);
        assert_code(&out, 64);
    }
}

#[test]
fn missing_config_exits_3_and_leaves_no_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out_dir = dir.path().join("out");
    let out = run(&[
        "train",
        "--config",
        missing.to_str().unwrap(),
        "--data",
        missing.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 3);
    assert!(!out_dir.exists(), "failed command created artifacts");
}

#[test]
fn pipeline_produces_manifested_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_corpus(dir.path());
    verify_manifest(&data);

    let run_dir = dir.path().join("run");
    let train = data.join("train.jsonl");
    let mut args = train_args(train.to_str().unwrap(), run_dir.to_str().unwrap());
    let heldout = data.join("heldout.jsonl");
    args.extend(["--heldout", heldout.to_str().unwrap(), "--diagnostics", "--eval-every", "10"]);
    let out = bin().args(&args).output().unwrap();
    assert_code(&out, 0);
    for name in [
        "vocab.txt",
        "steps.csv",
        "evals.csv",
        "diagnostics.csv",
        "checkpoints/checkpoint_epoch1.pfl",
    ] {
        assert!(run_dir.join(name).exists(), "{name} missing");
    }
    verify_manifest(&run_dir);
    let steps = std::fs::read_to_string(run_dir.join("steps.csv")).unwrap();
    assert!(steps.starts_with("step,epoch,loss,supervised_tokens,masked_fraction,grad_norm\n"));
    assert!(steps.lines().count() > 1, "no training steps logged");

    let eval_dir = dir.path().join("eval");
    let out = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("checkpoints/checkpoint_epoch1.pfl").to_str().unwrap(),
        "--vocab",
        run_dir.join("vocab.txt").to_str().unwrap(),
        "--data",
        heldout.to_str().unwrap(),
        "--out-dir",
        eval_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let metrics = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("token_accuracy,answer_em,perplexity,supervised_tokens\n"));
    verify_manifest(&eval_dir);

    let analyze_dir = dir.path().join("analyze");
    let out = run(&[
        "analyze-probs",
        "--checkpoint",
        run_dir.join("checkpoints/checkpoint_epoch1.pfl").to_str().unwrap(),
        "--vocab",
        run_dir.join("vocab.txt").to_str().unwrap(),
        "--data",
        data.join("train.jsonl").to_str().unwrap(),
        "--labels",
        data.join("labels.jsonl").to_str().unwrap(),
        "--out-dir",
        analyze_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(analyze_dir.join("stats.json")).unwrap())
            .unwrap();
    assert!(stats["p_value"].as_f64().unwrap() >= 0.0);
    assert!(stats["method"].is_string());
    for name in ["profile.csv", "density_core.csv", "density_trivial.csv"] {
        assert!(analyze_dir.join(name).exists(), "{name} missing");
    }
    verify_manifest(&analyze_dir);

    let plot_dir = dir.path().join("plots");
    let out = run(&[
        "plot",
        "--kind",
        "density",
        analyze_dir.join("density_core.csv").to_str().unwrap(),
        analyze_dir.join("density_trivial.csv").to_str().unwrap(),
        "--out-dir",
        plot_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let svg = std::fs::read_to_string(plot_dir.join("density.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    verify_manifest(&plot_dir);
}

#[test]
fn rerun_with_same_inputs_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_corpus(dir.path());
    let train = data.join("train.jsonl");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let run_dir = dir.path().join(name);
        let out = bin()
            .args(train_args(train.to_str().unwrap(), run_dir.to_str().unwrap()))
            .output()
            .unwrap();
        assert_code(&out, 0);
        outputs.push((
            std::fs::read(run_dir.join("steps.csv")).unwrap(),
            std::fs::read(run_dir.join("checkpoints/checkpoint_epoch1.pfl")).unwrap(),
            std::fs::read(run_dir.join("manifest.json")).unwrap(),
        ));
    }
    assert_eq!(outputs[0].0, outputs[1].0, "steps.csv differs");
    assert_eq!(outputs[0].1, outputs[1].1, "checkpoint differs");
    assert_eq!(outputs[0].2, outputs[1].2, "manifest differs");
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_corpus(dir.path());
    let train = data.join("train.jsonl");
    let run_dir = dir.path().join("run");
    let mut args = train_args(train.to_str().unwrap(), run_dir.to_str().unwrap());
    args.extend([
        "--learning-rate",
        "1e6",
        "--grad-clip",
        "none",
        "--epochs",
        "40",
    ]);
    let out = bin().args(&args).output().unwrap();
    assert_code(&out, 2);
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn verify_theory_reports_zero_violations() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("theory");
    let out = run(&[
        "verify-theory",
        "--draws",
        "3",
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("violations: 0"));
    let csv = std::fs::read_to_string(out_dir.join("theory_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header plus one row per draw");
    assert!(csv.starts_with("draw_id,V,P,p,"));
    verify_manifest(&out_dir);
}

fn sweep_args<'a>(command: &'a str, data: &'a Path, out: &'a str, buf: &'a mut Vec<String>) -> Vec<&'a str> {
    buf.push(data.join("train.jsonl").to_str().unwrap().to_string());
    buf.push(data.join("heldout.jsonl").to_str().unwrap().to_string());
    let mut args = vec![
        command,
        "--data",
        buf[0].as_str(),
        "--heldout",
        buf[1].as_str(),
        "--out-dir",
        out,
    ];
    args.extend(TINY_MODEL);
    args
}

#[test]
fn threshold_sweep_writes_the_grid_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_corpus(dir.path());
    let out_dir = dir.path().join("sweep");
    let out_str = out_dir.to_str().unwrap().to_string();
    let mut buf = Vec::new();
    let mut args = sweep_args("sweep-threshold", &data, &out_str, &mut buf);
    args.extend(["--taus", "0.0,0.005", "--modes", "above"]);
    let out = bin().args(&args).output().unwrap();
    assert_code(&out, 0);
    let table = std::fs::read_to_string(out_dir.join("threshold_sweep.csv")).unwrap();
    assert!(table.starts_with("tau,mode,supervised_fraction,"));
    assert_eq!(table.lines().count(), 3, "two grid points:\n{table}");
    assert!(out_dir.join("runs.csv").exists());
    verify_manifest(&out_dir);
}

#[test]
fn rank_sweep_clips_oversized_ranks() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_corpus(dir.path());
    let out_dir = dir.path().join("sweep");
    let out_str = out_dir.to_str().unwrap().to_string();
    let mut buf = Vec::new();
    let mut args = sweep_args("sweep-rank", &data, &out_str, &mut buf);
    args.extend(["--ranks", "2,4,1024", "--objectives", "standard_sft"]);
    let out = bin().args(&args).output().unwrap();
    assert_code(&out, 0);
    assert!(stdout(&out).contains("dropping ranks"));
    let table = std::fs::read_to_string(out_dir.join("rank_sweep.csv")).unwrap();
    for row in ["standard_sft,2,", "standard_sft,4,", "standard_sft,full,"] {
        assert!(table.contains(row), "missing {row} in:\n{table}");
    }
    assert!(!table.contains(",1024,"));
    verify_manifest(&out_dir);
}

#[test]
fn epoch_sweep_writes_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_corpus(dir.path());
    let out_dir = dir.path().join("sweep");
    let out_str = out_dir.to_str().unwrap().to_string();
    let mut buf = Vec::new();
    let mut args = sweep_args("sweep-epochs", &data, &out_str, &mut buf);
    args.extend(["--max-epochs", "2", "--objectives", "standard_sft"]);
    let out = bin().args(&args).output().unwrap();
    assert_code(&out, 0);
    let table = std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    assert!(table.contains("standard_sft,1,"));
    assert!(table.contains("standard_sft,2,"));
    verify_manifest(&out_dir);
}

#[test]
fn plots_are_deterministic_and_schema_checked() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("threshold_sweep.csv");
    std::fs::write(
        &table,
        "tau,mode,supervised_fraction,token_accuracy,answer_em,perplexity\n\
         0.1,above,0.5,0.4,0.2,12\n0.2,above,0.3,0.5,0.3,10\n",
    )
    .unwrap();
    let mut svgs = Vec::new();
    for name in ["p1", "p2"] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "plot",
            "--kind",
            "sweep",
            table.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
        svgs.push(std::fs::read(out_dir.join("threshold_token_accuracy.svg")).unwrap());
    }
    assert_eq!(svgs[0], svgs[1], "SVG output differs between runs");

    let out = run(&[
        "plot",
        "--kind",
        "trajectory",
        table.to_str().unwrap(),
        "--out-dir",
        dir.path().join("p3").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("missing column `epoch`"), "{}", stderr(&out));
}

#[test]
fn env_var_sets_the_default_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("from_env");
    let out = bin()
        .env("PROFITLAB_OUT", &out_dir)
        .args(["verify-theory", "--draws", "1"])
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert!(out_dir.join("theory_sweep.csv").exists());
    assert!(out_dir.join("manifest.json").exists());
}
