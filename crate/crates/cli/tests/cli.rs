use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raysem")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "raysem {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset(dir: &Path) -> PathBuf {
    let cfg = dir.join("scene.txt");
    std::fs::write(&cfg, "camera_width = 32\ncamera_height = 16\nlidar_azimuth_beams = 90\nlidar_elevation_beams = 8\n")
        .unwrap();
    let data = dir.join("data");
    ok(&["gen", "--config", s(&cfg), "--seed", "3", "--count", "6", "--out", s(&data)]);
    data
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["train", "--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["gen"]), 1);
    assert_eq!(code(&["--threads", "0", "gen", "--out", "/nonexistent/x"]), 1);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&["gen", "--config", s(&bad), "--out", s(&dir.path().join("d"))]), 2);
    std::fs::write(&bad, "classes = 1\n").unwrap();
    assert_eq!(code(&["gen", "--config", s(&bad), "--out", s(&dir.path().join("d"))]), 2);
    let data = tiny_dataset(dir.path());
    let out = dir.path().join("r");
    assert_eq!(code(&["train", "--data", s(&data), "--mode", "bogus", "--out", s(&out)]), 2);
    assert_eq!(code(&["train", "--data", s(&data), "--split", "0", "--out", s(&out)]), 2);
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(code(&["gen", "--config", s(&missing), "--out", s(&dir.path().join("d"))]), 3);
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&dir.path().join("r"))]), 3);

    let data = tiny_dataset(dir.path());
    let run_dir = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--epochs", "1", "--steps-per-epoch", "1", "--out", s(&run_dir)]);
    std::fs::write(run_dir.join("model.srck"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--data", s(&data), "--run", s(&run_dir)]), 3);
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    assert!(data.join("run.txt").exists());

    let run_dir = dir.path().join("run");
    ok(&[
        "--threads", "2", "train", "--data", s(&data), "--mode", "full", "--seed", "1", "--epochs", "1",
        "--steps-per-epoch", "3", "--out", s(&run_dir),
    ]);
    for f in ["config.txt", "report.txt", "model.srck", "run.txt"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let config = std::fs::read_to_string(run_dir.join("config.txt")).unwrap();
    assert!(config.contains("mode = full") && config.contains("seed = 1"), "{config}");

    let eval_out = ok(&["eval", "--data", s(&data), "--run", s(&run_dir)]);
    let report = std::fs::read_to_string(run_dir.join("report.txt")).unwrap();
    let exact = |t: &str| t.lines().find_map(|l| l.strip_prefix("# miou ")).map(str::to_owned);
    assert_eq!(exact(&eval_out), exact(&report));
    assert!(exact(&report).is_some());

    let render_dir = dir.path().join("render");
    ok(&["render-debug", "--data", s(&data), "--run", s(&run_dir), "--scene", "5", "--out", s(&render_dir)]);
    assert!(render_dir.join("render.txt").exists());
    assert!(std::fs::read_dir(&render_dir).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "ppm")));

    let abl = dir.path().join("ablate");
    ok(&["ablate", "--data", s(&data), "--seeds", "1", "--epochs", "1", "--steps-per-epoch", "1", "--out", s(&abl)]);
    let table = std::fs::read_to_string(abl.join("ablation.txt")).unwrap();
    for m in ["sup-only", "perspective", "no-sam", "full"] {
        assert!(table.contains(m), "{table}");
    }
}

#[test]
fn parallax_writes_one_row_per_offset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scene.txt");
    std::fs::write(&cfg, "camera_width = 32\ncamera_height = 16\nlidar_azimuth_beams = 90\n").unwrap();
    let out = dir.path().join("p");
    ok(&[
        "parallax", "--config", s(&cfg), "--scenes", "2", "--offsets", "0,1", "--samples", "64", "--out", s(&out),
    ]);
    let text = std::fs::read_to_string(out.join("parallax.txt")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).collect();
    // header plus two offsets
    assert_eq!(rows.len(), 3, "{text}");
}
