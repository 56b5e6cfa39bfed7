use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use edgepoint_slam::synthetic::{write_textured_sequence, SyntheticConfig};
use tempfile::TempDir;

const FRAMES: usize = 60;

struct Rendered {
    _dir: TempDir,
    path: PathBuf,
    diameter: f64,
}

/// Rendered once and shared by every test in this file.
fn rendered() -> &'static Rendered {
    static SEQ: OnceLock<Rendered> = OnceLock::new();
    SEQ.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("seq");
        let cfg = SyntheticConfig {
            frames: FRAMES,
            ..SyntheticConfig::default()
        };
        let seq = write_textured_sequence(&path, &cfg).unwrap();
        Rendered {
            diameter: seq.trajectory_diameter(),
            _dir: dir,
            path,
        }
    })
}

fn slam<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgepoint-slam"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn sequence_args(verb: &str, seq: &Path, out: &Path) -> Vec<String> {
    let path = |p: &Path| p.to_str().unwrap().to_string();
    vec![
        verb.to_string(),
        "--sequence".into(),
        path(seq),
        "--calib".into(),
        path(&seq.join("calib.txt")),
        "--out".into(),
        path(out),
    ]
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_on_rendered_sequence() {
    let seq = rendered();
    let out = TempDir::new().unwrap();
    let gt = seq.path.join("groundtruth.txt");
    let mut args = sequence_args("run", &seq.path, out.path());
    args.extend(["--gt".into(), gt.to_str().unwrap().to_string()]);
    let o = slam(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    for f in ["trajectory.txt", "map.ply", "report.json", "plotdata.csv"] {
        assert!(out.path().join(f).is_file(), "{f} missing");
    }
    let report = json(&out.path().join("report.json"));
    assert_eq!(report["status"], "completed");
    assert!(report["keyframes"].as_u64().unwrap() >= 3);
    let ate = report["ate_rmse_cm"].as_f64().unwrap();
    assert!(ate < seq.diameter, "ATE {ate} cm over a {} m path", seq.diameter);

    // the eval verb reproduces the figure from the written trajectory
    let o = slam(&["eval", "--est", out.path().join("trajectory.txt").to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let eval: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((eval["rmse_cm"].as_f64().unwrap() - ate).abs() < 1e-3 * ate.max(1.0));
}

#[test]
fn image_path_is_deterministic() {
    let seq = rendered();
    let runs: Vec<TempDir> = (0..2)
        .map(|_| {
            let out = TempDir::new().unwrap();
            let mut args = sequence_args("run", &seq.path, out.path());
            args.extend(["--seed".into(), "11".into()]);
            assert_eq!(slam(&args).status.code(), Some(0));
            out
        })
        .collect();
    for f in ["trajectory.txt", "map.ply"] {
        let a = std::fs::read(runs[0].path().join(f)).unwrap();
        let b = std::fs::read(runs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn init_only_writes_init_json() {
    let seq = rendered();
    let out = TempDir::new().unwrap();
    let args = sequence_args("init-only", &seq.path, out.path());
    assert_eq!(slam(&args).status.code(), Some(0));
    let init = json(&out.path().join("init.json"));
    assert_eq!(init["initialized"], true);
    assert!(init["map_points"].as_u64().unwrap() > 0);
    assert!(!out.path().join("trajectory.txt").exists());
}

#[test]
fn single_frame_sequence_fails_initialization() {
    let seq = rendered();
    let dir = TempDir::new().unwrap();
    let one = dir.path().join("one");
    std::fs::create_dir_all(one.join("rgb")).unwrap();
    std::fs::copy(seq.path.join("rgb/00000.png"), one.join("rgb/00000.png")).unwrap();
    std::fs::copy(seq.path.join("calib.txt"), one.join("calib.txt")).unwrap();
    std::fs::write(one.join("rgb.txt"), "0.000000 rgb/00000.png\n").unwrap();
    let out = dir.path().join("out");
    let args = sequence_args("run", &one, &out);
    assert_eq!(slam(&args).status.code(), Some(2));
    assert_eq!(json(&out.join("report.json"))["status"], "init_failed");
}

#[test]
fn missing_sequence_is_an_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nothing");
    let args = sequence_args("run", &missing, dir.path());
    assert_eq!(slam(&args).status.code(), Some(1));
}
