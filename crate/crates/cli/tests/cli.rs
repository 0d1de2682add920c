use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn think3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_think3d"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const FAST: [&str; 8] = ["--set", "sft.steps=3", "--set", "rl.steps=1", "--set", "data.test_count=8", "--set", "data.train_count=16"];

fn run(sub: &str, out: &Path, extra: &[&str]) -> Output {
    let cfg = smoke();
    let mut args = vec![sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(&FAST);
    args.extend_from_slice(extra);
    think3d(&args)
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&think3d(&["--help"])), 0);
    assert_eq!(code(&think3d(&["--version"])), 0);
    assert_eq!(code(&think3d(&["frobnicate"])), 1);
    assert_eq!(code(&think3d(&["eval"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let o = run("ablate", dir.path(), &["--axis", "depth"]);
    assert_eq!(code(&o), 1);
    let o = run("datagen", dir.path(), &["--set", "sft.no_such_key=1"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = run("train-sft", &dir.path().join("sft"), &["--data", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    // A dataset produced under another seed fails the config-hash check.
    let data = dir.path().join("data");
    assert_eq!(code(&run("datagen", &data, &["--seed", "1"])), 0);
    let o = run("eval", &dir.path().join("eval"), &["--data", data.to_str().unwrap(), "--seed", "2"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn datagen_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = run("datagen", &a, &["--seed", "7"]);
    assert_eq!(code(&oa), 0);
    assert_eq!(code(&run("datagen", &b, &["--seed", "7"])), 0);
    for f in ["train.jsonl", "test.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let stdout = String::from_utf8(oa.stdout).unwrap();
    assert!(stdout.contains("train.jsonl: 16 records"), "{stdout}");
    assert!(stdout.contains("relative-direction"));
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    assert_eq!(code(&run("datagen", &data, &[])), 0);
    let sft = dir.path().join("sft");
    let o = run("train-sft", &sft, &["--data", d]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s1 = sft.join("checkpoints/latest");
    let rl = dir.path().join("rl");
    let o = run("train-rl", &rl, &["--data", d, "--checkpoint", s1.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s2 = rl.join("checkpoints/latest");
    let ev = dir.path().join("eval");
    let o = run("eval", &ev, &["--data", d, "--checkpoint", s2.to_str().unwrap(), "--format", "json"]);
    assert_eq!(code(&o), 0);
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert!(ev.join("eval_report.txt").exists());
    let ex = dir.path().join("export");
    let o = run("export-latents", &ex, &["--data", d, "--checkpoint", s2.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(std::fs::read_dir(ex.join("latents")).unwrap().count() > 0);
    // Resuming a finished run under a changed config is refused.
    let o = run("train-sft", &sft, &["--data", d, "--resume", "--set", "sft.lr=1e-4"]);
    assert_eq!(code(&o), 2);
}
