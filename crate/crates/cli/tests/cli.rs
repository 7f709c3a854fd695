// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command as Proc, Output};

use facetsteer_cli::config::PipelineConfig;
use facetsteer_cli::{run, run_with_config, CliError, Command, Manifest, Overrides, EXIT_STAGE_FAILURE, EXIT_USAGE};
use facetsteer_core::util::sha256_hex;
use serde_json::{json, Value};

fn small_config() -> Value {
    json!({
        "version": 1,
        "seed": 11,
        "output_dir": "out",
        "corpus": {"per_facet": 12, "classifier": {"epochs": 20}},
        "activations": {},
        "sae": {"d_latent": 64, "epochs": 4},
        "featsel": {"d_steer": 8},
        "cvtrain": {"opt": {"iterations": 20}, "ablation": {"facets": ["Ideas"]}},
        "steering": {"n_inputs": 4},
        "routing": {},
        "eval": {"questions_per_character": 2}
    })
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn facetsteer(args: &[&str]) -> Output {
    Proc::new(env!("CARGO_BIN_EXE_facetsteer")).args(args).output().unwrap()
}

fn stderr_report(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn unknown_command_exits_with_usage_status() {
    let out = facetsteer(&["frobnicate", "--config", "x.json"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let out = facetsteer(&["pipeline"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE), "missing --config");
}

#[test]
fn missing_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config();
    v.as_object_mut().unwrap().remove("sae");
    let p = write_config(dir.path(), &v);
    let out = facetsteer(&["corpus-gen", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let r = stderr_report(&out);
    assert_eq!(r["kind"], "config");
    assert!(r["message"].as_str().unwrap().contains("`sae`"), "{r}");

    v = small_config();
    v.as_object_mut().unwrap().remove("version");
    let err = PipelineConfig::from_json(&v.to_string(), dir.path()).unwrap_err();
    assert!(err.to_string().contains("`version`"), "{err}");
}

#[test]
fn unsupported_version_and_unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config();
    v["version"] = json!(2);
    let err = PipelineConfig::from_json(&v.to_string(), dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_USAGE);
    assert!(err.to_string().contains("version 2"), "{err}");

    let mut v = small_config();
    v["sae"]["l2_coeff"] = json!(1.0);
    let err = PipelineConfig::from_json(&v.to_string(), dir.path()).unwrap_err();
    assert!(err.to_string().contains("l2_coeff"), "{err}");

    let mut v = small_config();
    v["corpus"]["input"] = json!("does/not/exist.jsonl");
    assert!(matches!(
        PipelineConfig::from_json(&v.to_string(), dir.path()),
        Err(CliError::Config(_))
    ));
}

#[test]
fn stage_without_prerequisites_fails_with_stage_status() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), &small_config());
    let out = facetsteer(&["sae-train", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_STAGE_FAILURE));
    let r = stderr_report(&out);
    assert_eq!(r["kind"], "stage");
    assert_eq!(r["stage"], "sae-train");
    assert!(r["message"].as_str().unwrap().contains("acts-synth"), "{r}");
}

#[test]
fn relative_output_dir_resolves_against_config_location() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), &small_config());
    let cfg = PipelineConfig::load(&p).unwrap();
    assert_eq!(cfg.output_dir, dir.path().join("out"));
}

fn load_small(dir: &Path) -> PipelineConfig {
    PipelineConfig::load(&write_config(dir, &small_config())).unwrap()
}

fn manifest_at(dir: &Path, rel: &str) -> Manifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join(rel)).unwrap()).unwrap()
}

#[test]
fn pipeline_binary_writes_manifested_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), &small_config());
    let out = facetsteer(&["pipeline", "-c", p.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ok: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(ok["status"], "ok");

    let root = dir.path().join("out");
    let m = manifest_at(&root, "manifest.json");
    assert_eq!(ok["artifacts"], json!(m.artifacts.len()));
    for a in &m.artifacts {
        let bytes = std::fs::read(root.join(&a.path)).unwrap();
        assert_eq!(sha256_hex(&bytes), a.sha256, "{}", a.path);
        assert_eq!(bytes.len() as u64, a.bytes);
    }
    let names: Vec<&str> = m.artifacts.iter().map(|a| a.path.as_str()).collect();
    for expect in [
        "corpus.jsonl",
        "corpus_validation.json",
        "activations.fsta",
        "sae.bin",
        "masks/ideas.json",
        "cvs/ideas.json",
        "cl_ablation.json",
        "control_vectors.json",
        "caa_vectors.json",
        "steer_report.json",
        "sweep.csv",
        "sweep_caa.csv",
        "routing.json",
        "eval_report.json",
        "eval_report.csv",
        "judged.jsonl",
    ] {
        assert!(names.contains(&expect), "{expect} missing from {names:?}");
    }
    for c in Command::STAGES {
        assert!(root.join(format!("manifests/{c}.json")).is_file(), "{c}");
    }
    // the echoed config is location independent
    assert_eq!(m.config["output_dir"], ".");
    assert!(std::fs::read_to_string(root.join("sweep.csv"))
        .unwrap()
        .starts_with("alpha,on_target_logit,"));
}

#[test]
fn stage_by_stage_matches_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = load_small(dir.path());
    a.output_dir = dir.path().join("a");
    let mut b = a.clone();
    b.output_dir = dir.path().join("b");

    let piped = run_with_config(Command::Pipeline, a).unwrap();
    let mut stepped = BTreeMap::new();
    for c in Command::STAGES {
        let m = run_with_config(c, b.clone()).unwrap();
        assert_eq!(m.command, c.name());
        stepped.extend(m.checksums());
    }
    assert_eq!(piped.checksums(), stepped);
}

#[test]
fn seed_override_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), &small_config());
    let corpus_sum = |seed: u64, out: &str| {
        let o = Overrides {
            seed: Some(seed),
            output_dir: Some(dir.path().join(out)),
        };
        let m = run(Command::CorpusGen, &p, &o).unwrap();
        assert_eq!(m.seed, seed);
        m.checksums()["corpus.jsonl"].clone()
    };
    assert_eq!(corpus_sum(1, "s1"), corpus_sum(1, "s1b"));
    assert_ne!(corpus_sum(1, "s1"), corpus_sum(2, "s2"));
}

#[test]
fn failed_leakage_gate_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load_small(dir.path());
    cfg.corpus.min_macro_f1 = 1.01;
    run_with_config(Command::CorpusGen, cfg.clone()).unwrap();
    let err = run_with_config(Command::CorpusValidate, cfg).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_STAGE_FAILURE);
    assert!(err.to_string().contains("macro"), "{err}");
}
