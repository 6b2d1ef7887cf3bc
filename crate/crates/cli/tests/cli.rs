use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use klora_core::synth::random_pair;
use klora_core::{read_manifest, serialize_file, FusionManifest, Selection};
use serde_json::Value;
use tempfile::TempDir;

fn klora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_klora"))
        .args(args)
        .output()
        .expect("spawn klora")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pair(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let (c, st) = random_pair(seed, 6, (2, 8), (8, 24)).unwrap();
    let (cp, sp) = (
        dir.join("content.safetensors"),
        dir.join("style.safetensors"),
    );
    serialize_file(&c, &cp).unwrap();
    serialize_file(&st, &sp).unwrap();
    (cp, sp)
}

#[test]
fn help_lists_flags() {
    let out = klora(&["schedule", "--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in [
        "--content",
        "--style",
        "--output",
        "--steps",
        "--alpha",
        "--beta",
        "--alpha-prime",
        "--beta-prime",
        "--scale-mode",
        "--k",
        "--solo-policy",
        "--no-lora-alpha",
        "--heatmap",
        "--heatmap-format",
        "--cell-size",
        "--json",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    let out = klora(&["ablate", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in [
        "--mode",
        "--seed",
        "--p-content",
        "--fraction",
        "--k-values",
        "--fixed-reading",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn unknown_flag_and_bad_numbers_exit_2() {
    assert_eq!(klora(&["schedule", "--bogus"]).status.code(), Some(2));
    assert_eq!(klora(&["frobnicate"]).status.code(), Some(2));
    let dir = TempDir::new().unwrap();
    let (c, st) = pair(dir.path(), 1);
    let m = dir.path().join("m.json");
    for bad in [["--alpha", "nan"], ["--steps", "x"], ["--k", "0"]] {
        let out = klora(&[
            "schedule",
            "--content",
            s(&c),
            "--style",
            s(&st),
            "-o",
            s(&m),
            bad[0],
            bad[1],
        ]);
        assert_eq!(out.status.code(), Some(2), "{bad:?}");
    }
}

#[test]
fn missing_and_corrupt_inputs_exit_2() {
    let dir = TempDir::new().unwrap();
    let (c, _) = pair(dir.path(), 2);
    let m = dir.path().join("m.json");
    let missing = dir.path().join("nope.safetensors");
    let out = klora(&[
        "schedule",
        "--content",
        s(&c),
        "--style",
        s(&missing),
        "-o",
        s(&m),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let junk = dir.path().join("junk.safetensors");
    std::fs::write(&junk, b"\x03\x00\x00").unwrap();
    let out = klora(&[
        "schedule",
        "--content",
        s(&c),
        "--style",
        s(&junk),
        "-o",
        s(&m),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = klora(&[
        "schedule",
        "--content",
        s(&c),
        "--style",
        s(&c),
        "-o",
        s(&m),
        "--steps",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn schedule_records_defaults_and_config() {
    let dir = TempDir::new().unwrap();
    let (c, st) = pair(dir.path(), 3);
    let m = dir.path().join("m.json");
    let out = klora(&[
        "schedule",
        "--content",
        s(&c),
        "--style",
        s(&st),
        "--steps",
        "50",
        "-o",
        s(&m),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest = FusionManifest::read(&m).unwrap();
    assert_eq!(manifest.params.alpha, 1.5);
    assert_eq!(manifest.params.beta, 0.5);
    assert_eq!(manifest.params.total_steps, 50);
    assert_eq!(manifest.mode, "topk");
    let config = manifest.run_config.unwrap();
    assert_eq!(config["subcommand"], "schedule");
    assert_eq!(config["steps"], 50);
    assert_eq!(config["scale_mode"], "linear");
    let schedule = read_manifest(&m).unwrap();
    assert_eq!(schedule.total_steps(), 50);
    assert!(schedule.grid.iter().all(|row| row.len() == 50));
}

#[test]
fn ablate_random_seed_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let (c, st) = pair(dir.path(), 4);
    let run = |name: &str, seed: &str| {
        let m = dir.path().join(name);
        let out = klora(&[
            "ablate",
            "--mode",
            "random",
            "--seed",
            seed,
            "--content",
            s(&c),
            "--style",
            s(&st),
            "-o",
            s(&m),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read(m).unwrap()
    };
    let a = run("a.json", "7");
    let b = run("b.json", "7");
    let other = run("c.json", "8");
    assert_eq!(a, b);
    assert_ne!(a, other);
}

#[test]
fn ablate_needs_style_except_subset() {
    let dir = TempDir::new().unwrap();
    let (c, _) = pair(dir.path(), 5);
    let m = dir.path().join("m.json");
    let out = klora(&[
        "ablate",
        "--mode",
        "no-scale",
        "--content",
        s(&c),
        "-o",
        s(&m),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = klora(&[
        "ablate",
        "--mode",
        "subset",
        "--fraction",
        "0.5",
        "--content",
        s(&c),
        "-o",
        s(&m),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let schedule = read_manifest(&m).unwrap();
    for t in 0..schedule.total_steps() {
        let active = schedule
            .column(t)
            .iter()
            .filter(|&&x| x == Selection::Content)
            .count();
        assert_eq!(active, 3);
    }
}

#[test]
fn k_sweep_writes_one_manifest_per_k() {
    let dir = TempDir::new().unwrap();
    let (c, st) = pair(dir.path(), 6);
    let out_dir = dir.path().join("sweep");
    let out = klora(&[
        "--json",
        "ablate",
        "--mode",
        "k-sweep",
        "--k-values",
        "1,4,16",
        "--content",
        s(&c),
        "--style",
        s(&st),
        "-o",
        s(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["sweep"].as_array().unwrap().len(), 3);
    for k in [1, 4, 16] {
        let m = FusionManifest::read(out_dir.join(format!("k_{k}.json"))).unwrap();
        assert!(m.layers.iter().all(|l| l.k_used.unwrap() <= k));
    }
}

#[test]
fn merge_rejects_digest_mismatch() {
    let dir = TempDir::new().unwrap();
    let (c, st) = pair(dir.path(), 7);
    let m = dir.path().join("m.json");
    assert!(klora(&[
        "schedule",
        "--content",
        s(&c),
        "--style",
        s(&st),
        "-o",
        s(&m)
    ])
    .status
    .success());
    let out_dir = dir.path().join("out");
    let out = klora(&[
        "merge",
        "--manifest",
        s(&m),
        "--content",
        s(&st),
        "--style",
        s(&c),
        "-o",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));

    let out = klora(&[
        "merge",
        "--manifest",
        s(&m),
        "--content",
        s(&c),
        "--style",
        s(&st),
        "-o",
        s(&out_dir),
        "--boundaries-only",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("step_000.safetensors").exists());
}

#[test]
fn analyze_reports_text_and_json() {
    let dir = TempDir::new().unwrap();
    let (c, st) = pair(dir.path(), 8);
    let out = klora(&["analyze", "--content", s(&c), "--style", s(&st)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("gamma ="));
    assert!(text.contains("histogram"));
    assert!(text.contains("unet.block0.attn.to_q"));

    let out = klora(&["--json", "analyze", "--content", s(&c), "--style", s(&st)]);
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["layers"].as_array().unwrap().len(), 6);
    assert!(report["gamma"]["value"].as_f64().unwrap() > 0.0);
    let hist = &report["histograms"]["content"];
    let binned: u64 = hist["bins"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["count"].as_u64().unwrap())
        .sum();
    assert_eq!(
        binned + hist["zeros"].as_u64().unwrap(),
        hist["total"].as_u64().unwrap()
    );
}

#[test]
fn heatmap_from_manifest() {
    let dir = TempDir::new().unwrap();
    let (c, st) = pair(dir.path(), 9);
    let m = dir.path().join("m.json");
    assert!(klora(&[
        "schedule",
        "--content",
        s(&c),
        "--style",
        s(&st),
        "-o",
        s(&m)
    ])
    .status
    .success());
    let ppm = dir.path().join("h.ppm");
    let out = klora(&[
        "heatmap",
        "--manifest",
        s(&m),
        "-o",
        s(&ppm),
        "--format",
        "ppm",
        "--cell-size",
        "2",
    ]);
    assert!(out.status.success());
    let bytes = std::fs::read(&ppm).unwrap();
    assert!(bytes.starts_with(b"P6\n12 100\n255\n"));
}

#[test]
fn bad_thread_env_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_klora"))
        .args(["heatmap", "--manifest", "x.json", "-o", "y.svg"])
        .env("KLORA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
