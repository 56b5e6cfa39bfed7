//! Full pipeline on projected wireframe tracks along a circular path.
//!
//! `cargo run --release --example synthetic_slam [out_dir]` writes the
//! trajectory, map and report into `out_dir` (a temporary directory by default).

use edgepoint_slam::run::run_with_frontend;
use edgepoint_slam::synthetic::{SyntheticConfig, SyntheticFrontend, SyntheticSequence};
use edgepoint_slam::Config;

fn main() -> edgepoint_slam::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let out = std::env::args().nth(1).map_or_else(|| tmp.path().to_path_buf(), Into::into);

    let seq = SyntheticSequence::circle(SyntheticConfig::default());
    let gt = seq.groundtruth();
    let diameter = seq.trajectory_diameter();
    let outcome = run_with_frontend(SyntheticFrontend::new(seq), Config::default(), &out, Some(&gt))?;

    let r = &outcome.report;
    println!("status {:?}: {} frames, {} keyframes, {} map points", r.status, r.frames, r.keyframes, r.map_points);
    if let Some(ate) = r.ate_rmse_cm {
        println!("ATE {ate:.3} cm over a {diameter:.2} m path");
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
