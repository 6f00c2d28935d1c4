use std::path::Path;
use std::process::{Command, Output};

fn vlidar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlidar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn lists_presets() {
    let out = vlidar(&["synth", "--list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "two-movers"));
}

#[test]
fn synth_run_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = vlidar(&["synth", "--preset", "lateral", "--out", s(&data)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let out = vlidar(&["run", s(&data.join("manifest.txt")), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("motions.json").exists());
    assert!(run.join("virtual/000001.bin").exists());
    assert!(run.join("virtual/000001.ply").exists());

    let report = dir.path().join("eval/report.json");
    let out = vlidar(&[
        "eval",
        s(&run.join("virtual")),
        s(&data.join("gt_virtual")),
        "--protocol",
        "vehicle",
        "--out",
        s(&report),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report.exists() && report.with_extension("txt").exists());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("mean"), "{text}");
}

#[test]
fn missing_image_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(vlidar(&["synth", "--preset", "lateral", "--out", s(&data)]).status.success());
    std::fs::remove_file(data.join("image/000002.pgm")).unwrap();
    let out = vlidar(&["run", s(&data.join("manifest.txt")), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(dir.path().join("run/virtual/000001.bin").exists());
}

#[test]
fn fatal_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "klt.window = 20\n").unwrap();
    let out = vlidar(&["--config", s(&cfg), "run", "nowhere.txt", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = vlidar(&["run", s(&dir.path().join("missing.txt")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let out = vlidar(&["eval", s(&a), s(&b), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = vlidar(&["synth", "--preset", "nope", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}
