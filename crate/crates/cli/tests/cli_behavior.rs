//! Command-level behavior: flag semantics and exit codes.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fusionseg")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fusionseg-clibehavior-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY: &[&str] = &[
    "--set", "scene.image_size=32",
    "--set", "scene.object_count=1..2",
    "--set", "radar.points_per_object=4..8",
];

#[test]
fn gen_refuses_non_empty_dir_without_force() {
    let dir = scratch("force");
    let out_dir = dir.join("corpus");
    std::fs::create_dir_all(&out_dir).unwrap();
    std::fs::write(out_dir.join("junk.txt"), "x").unwrap();

    let mut args = vec!["gen", "--out", out_dir.to_str().unwrap(), "--count", "2", "--seed", "1"];
    args.extend(TINY);
    let out = Command::new(bin()).args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "expected config-error exit code");

    args.push("--force");
    let out = Command::new(bin()).args(&args).output().unwrap();
    assert!(out.status.success());
}

#[test]
fn adverse_only_excludes_the_clean_mode() {
    let dir = scratch("adverse");
    let out_dir = dir.join("corpus");
    let mut args = vec![
        "gen", "--out", out_dir.to_str().unwrap(), "--count", "12", "--seed", "2",
        "--adverse-only", "--set", "corruption.modes=none,fog,blur",
    ];
    args.extend(TINY);
    let out = Command::new(bin()).args(&args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    let mut scene_lines = 0;
    for line in manifest.lines().filter(|l| l.starts_with("scene ")) {
        scene_lines += 1;
        assert!(
            !line.contains("corruption=none"),
            "adverse-only corpus contains a clean scene: {line}"
        );
    }
    assert_eq!(scene_lines, 12);
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = scratch("badkey");
    let out = Command::new(bin())
        .args([
            "gen", "--out", dir.join("c").to_str().unwrap(), "--count", "1", "--seed", "1",
            "--set", "scene.not_a_key=3",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
}

#[test]
fn missing_corpus_exits_with_io_code() {
    let dir = scratch("missing");
    let out = Command::new(bin())
        .args([
            "eval", "--corpus", dir.join("nope").to_str().unwrap(), "--pred", "gt",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gt_self_check_scores_perfect_miou() {
    let dir = scratch("gtself");
    let out_dir = dir.join("corpus");
    let mut args = vec!["gen", "--out", out_dir.to_str().unwrap(), "--count", "5", "--seed", "4"];
    args.extend(TINY);
    assert!(Command::new(bin()).args(&args).output().unwrap().status.success());

    let out = Command::new(bin())
        .args([
            "eval", "--corpus", out_dir.to_str().unwrap(), "--pred", "gt", "--split", "train",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mIoU        1.0000"), "{stdout}");
}
