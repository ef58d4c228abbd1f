use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use retro_pager::cli::{RunManifest, EXIT_INVALID_CONFIG, EXIT_USAGE};
use retro_pager::model::{load_checkpoint, Model, ModelConfig};
use serde_json::Value;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retro-pager"))
        .current_dir(dir)
        .env_remove("RETRO_PAGER_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&o.stderr)))
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const SMALL: &str = r#"{"model":{"d_model":16,"n_heads":2,"n_layers":2,"d_ff":32,"page_size":16},"train":{"grad_accum_steps":2}}"#;

#[test]
fn gen_is_byte_deterministic() {
    let t = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        let o = bin(t.path(), &["gen", "--kind", "pairwise", "--n", "100", "--seed", "7", "--run-dir", d]);
        assert!(o.status.success());
    }
    let a = fs::read(t.path().join("a/data.jsonl")).unwrap();
    assert_eq!(a, fs::read(t.path().join("b/data.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 100);
    assert_eq!(manifest(&t.path().join("a")).input_hash, manifest(&t.path().join("b")).input_hash);
}

#[test]
fn every_kind_generates() {
    let t = tempfile::tempdir().unwrap();
    for kind in ["pairwise", "qa", "needle"] {
        let o = bin(t.path(), &["gen", "--kind", kind, "--n", "3", "--haystack-pages", "8", "--run-dir", kind]);
        assert!(o.status.success(), "{kind}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn zero_step_training_writes_the_initial_model() {
    let t = tempfile::tempdir().unwrap();
    let o = bin(t.path(), &["train", "--stage", "1", "--steps", "0", "--seed", "3", "--run-dir", "r"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = load_checkpoint(&t.path().join("r/checkpoint.bin")).unwrap();
    let init = Model::init(ModelConfig { seed: 3, ..Default::default() }).unwrap();
    assert_eq!(ckpt.model.config, init.config);
    for (a, b) in ckpt.model.params.tensors.iter().zip(&init.params.tensors) {
        let rounded: Vec<f64> = b.value.data.iter().map(|&x| x as f32 as f64).collect();
        assert_eq!(a.value.data, rounded, "{}", a.name);
    }
    assert_eq!(ckpt.stage, "init");
}

#[test]
fn stage1_training_moves_only_the_bookmark_path() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.json"), SMALL).unwrap();
    assert!(bin(t.path(), &["--config", "c.json", "train", "--stage", "1", "--steps", "0", "--run-dir", "a"]).status.success());
    let o = bin(t.path(), &["--config", "c.json", "train", "--stage", "1", "--steps", "2", "--run-dir", "b"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = load_checkpoint(&t.path().join("a/checkpoint.bin")).unwrap();
    let b = load_checkpoint(&t.path().join("b/checkpoint.bin")).unwrap();
    let mut moved = 0;
    for (i, (x, y)) in a.model.params.tensors.iter().zip(&b.model.params.tensors).enumerate() {
        if b.freeze.is_trainable(i) {
            moved += usize::from(x.value != y.value);
        } else {
            assert_eq!(x.value, y.value, "{} changed", x.name);
        }
    }
    assert!(moved > 0);
    assert_eq!(fs::read_to_string(t.path().join("b/metrics.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn stage2_uses_its_own_learning_rate_and_accepts_needle_data() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.json"), SMALL).unwrap();
    let g = bin(t.path(), &["--config", "c.json", "gen", "--kind", "needle", "--n", "2", "--haystack-pages", "6", "--run-dir", "g"]);
    assert!(g.status.success());
    let o = bin(t.path(), &["--config", "c.json", "train", "--stage", "2", "--steps", "1", "--data", "g/data.jsonl", "--run-dir", "r"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&t.path().join("r"));
    assert_eq!(m.config.train.learning_rate, 1e-6);
    assert_eq!(m.config.train.grad_accum_steps, 2);
    assert_eq!(m.inputs.len(), 2);
}

#[test]
fn equivalence_suite_passes() {
    let t = tempfile::tempdir().unwrap();
    let o = bin(t.path(), &["eval", "--suite", "equivalence", "--run-dir", "r"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(t.path().join("r/report.json")).unwrap()).unwrap();
    assert_eq!(r["pass"], true);
    assert!(r["max_abs_diff"].as_f64().unwrap() < 1e-4);
}

#[test]
fn recall_needle_and_trace_write_reports() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.json"), SMALL).unwrap();
    let c = ["--config", "c.json"];
    let o = bin(t.path(), &[&c[..], &["eval", "--suite", "recall", "--n", "20", "--run-dir", "r"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(t.path().join("r/report.json")).unwrap()).unwrap();
    assert!(r["recall"]["chance"].is_number() && r["recall"]["layer_1"].is_number());

    let o = bin(t.path(), &[&c[..], &["eval", "--suite", "needle", "--n", "1", "--haystack-pages", "8", "--run-dir", "n"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(t.path().join("n/report.json")).unwrap()).unwrap();
    assert_eq!(r["needle"].as_object().unwrap().len(), 10);

    let o = bin(t.path(), &[&c[..], &["trace", "--tokens", "160", "--run-dir", "tr"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let scores = fs::read_to_string(t.path().join("tr/score_trace.csv")).unwrap();
    assert!(scores.starts_with("layer,page,score"));
    assert!(fs::read_to_string(t.path().join("tr/audit.csv")).unwrap().starts_with("step,layer,attended_kv"));
    let m = manifest(&t.path().join("tr"));
    assert_eq!(m.outputs.len(), 4);
    assert!(m.outputs.iter().all(|p| t.path().join(p).exists()));
}

#[test]
fn usage_errors_exit_2_with_json() {
    let t = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["gen", "--kind", "pairwise", "--bogus"], &["train", "--stage", "3"]] {
        let o = bin(t.path(), args);
        assert_eq!(o.status.code(), Some(EXIT_USAGE), "{args:?}");
        assert_eq!(stderr_json(&o)["error"], "UsageError");
    }
}

#[test]
fn config_violations_exit_3_with_json() {
    let t = tempfile::tempdir().unwrap();
    let bad = [
        r#"{"modle":{}}"#,
        r#"{"model":{"d_model":30,"n_heads":4}}"#,
        r#"{"engine":{"k_pages":1}}"#,
        r#"{"train":{"learning_rate":-1}}"#,
        r#"{"train":{"nope":1}}"#,
        "not json",
    ];
    for (i, text) in bad.iter().enumerate() {
        fs::write(t.path().join("c.json"), text).unwrap();
        let o = bin(t.path(), &["--config", "c.json", "gen", "--kind", "qa", "--n", "1", "--run-dir", &format!("r{i}")]);
        assert_eq!(o.status.code(), Some(EXIT_INVALID_CONFIG), "{text}");
        assert_eq!(stderr_json(&o)["error"], "InvalidConfig");
    }
    let o = bin(t.path(), &["--threads", "0", "gen", "--kind", "qa", "--run-dir", "z"]);
    assert_eq!(o.status.code(), Some(EXIT_INVALID_CONFIG));
}

#[test]
fn seed_precedence_is_flag_then_file_then_env() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.json"), r#"{"seed":5}"#).unwrap();
    let run = |args: &[&str], env: Option<&str>, dir: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_retro-pager"));
        c.current_dir(t.path()).env_remove("RETRO_PAGER_SEED");
        if let Some(e) = env {
            c.env("RETRO_PAGER_SEED", e);
        }
        let o = c.args(args).args(["gen", "--kind", "qa", "--n", "1", "--run-dir", dir]).output().unwrap();
        assert!(o.status.success());
        manifest(&t.path().join(dir)).seed
    };
    assert_eq!(run(&["--seed", "9", "--config", "c.json"], Some("11"), "a"), 9);
    assert_eq!(run(&["--config", "c.json"], Some("11"), "b"), 5);
    assert_eq!(run(&[], Some("11"), "c"), 11);
    assert_eq!(run(&[], None, "d"), 0);
}

#[test]
fn runs_never_overwrite_their_inputs() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.json"), SMALL).unwrap();
    assert!(bin(t.path(), &["--config", "c.json", "train", "--stage", "1", "--steps", "0", "--run-dir", "r"]).status.success());
    let before = fs::read(t.path().join("r/checkpoint.bin")).unwrap();
    let o = bin(t.path(), &["--config", "c.json", "train", "--stage", "1", "--steps", "1", "--init", "r/checkpoint.bin", "--run-dir", "r"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "InvalidInput");
    assert_eq!(fs::read(t.path().join("r/checkpoint.bin")).unwrap(), before);
}

#[test]
fn default_run_dir_is_timestamped_under_runs() {
    let t = tempfile::tempdir().unwrap();
    let o = bin(t.path(), &["gen", "--kind", "qa", "--n", "1"]);
    assert!(o.status.success());
    let dirs: Vec<_> = fs::read_dir(t.path().join("runs")).unwrap().collect();
    assert_eq!(dirs.len(), 1);
    let dir = dirs[0].as_ref().unwrap().path();
    assert!(dir.join("manifest.json").exists() && dir.join("data.jsonl").exists());
}
