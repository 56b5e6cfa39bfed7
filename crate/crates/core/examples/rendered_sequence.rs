//! Renders a textured sequence to disk and runs the image pipeline on it,
//! the same path the `run` verb takes on a TUM sequence.
//!
//! `cargo run --release --example rendered_sequence [dir] [frames]`

use edgepoint_slam::run::{run_sequence, RunOptions};
use edgepoint_slam::synthetic::{write_textured_sequence, SyntheticConfig};

fn main() -> edgepoint_slam::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut args = std::env::args().skip(1);
    let dir = args.next().map_or_else(|| tmp.path().to_path_buf(), Into::into);
    let frames = args.next().map_or(80, |s| s.parse().expect("frame count"));

    let seq_dir = dir.join("sequence");
    let seq = write_textured_sequence(&seq_dir, &SyntheticConfig { frames, ..SyntheticConfig::default() })?;
    let opts = RunOptions {
        calib: seq_dir.join("calib.txt"),
        groundtruth: Some(seq_dir.join("groundtruth.txt")),
        out: dir.join("out"),
        sequence: seq_dir,
        ..RunOptions::default()
    };
    let outcome = run_sequence(&opts)?;
    let r = &outcome.report;
    println!("status {:?}, exit code {}", r.status, outcome.exit_code());
    println!("{} keyframes, {} map points, {} frames skipped as blurred", r.keyframes, r.map_points, r.skipped_frames);
    if let Some(ate) = r.ate_rmse_cm {
        println!("ATE {ate:.2} cm over a {:.2} m path", seq.trajectory_diameter());
    }
    Ok(())
}
