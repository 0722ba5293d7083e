//! Runs the `rlcs` binary on the smoke configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn rlcs(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlcs"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(config: &Path, out: &Path, args: &[&str]) {
    let o = rlcs(config, out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.to_string_lossy().ends_with("_timing.csv") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

const PIPELINE: &[&[&str]] = &[
    &["gen-data"],
    &["train", "--stage", "genrm_sft"],
    &["train", "--stage", "genrm_grpo"],
    &["train", "--stage", "story_sft"],
    &["train", "--stage", "story_rl"],
    &["eval", "--target", "genrm_grpo", "--baseline", "genrm_sft"],
    &["eval", "--target", "story_rl", "--baseline", "story_sft"],
    &["eval", "--target", "coin"],
];

#[test]
fn pipeline_is_byte_reproducible() {
    let config = smoke_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        for args in PIPELINE {
            run_ok(&config, dir.path(), args);
        }
    }
    let (a, b) = (files(dirs[0].path()), files(dirs[1].path()));
    assert!(a.len() >= 10, "only {} artifacts", a.len());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (path, bytes) in &a {
        assert!(bytes == &b[path], "{} differs between runs", path.display());
    }
}

#[test]
fn missing_upstream_stage_is_reported() {
    let config = smoke_config();
    let dir = tempfile::tempdir().unwrap();
    run_ok(&config, dir.path(), &["gen-data"]);
    let o = rlcs(&config, dir.path(), &["train", "--stage", "genrm_grpo"]);
    assert_eq!(o.status.code(), Some(13));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.starts_with("error[stage-dependency]"), "{stderr}");
    assert!(stderr.contains("genrm_sft"), "{stderr}");
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "seed = 1\nlearning_rat = 0.1\n").unwrap();
    let o = rlcs(&config, dir.path(), &["show-config"]);
    assert_eq!(o.status.code(), Some(12));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[config]"));
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = rlcs(&smoke_config(), dir.path(), &["show-config"]);
    assert!(o.status.success());
    let shown = dir.path().join("shown.toml");
    std::fs::write(&shown, &o.stdout).unwrap();
    let again = rlcs(&shown, dir.path(), &["show-config"]);
    assert_eq!(o.stdout, again.stdout);
}
