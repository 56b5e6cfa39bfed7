//! ATE of an estimated trajectory against ground truth.
//!
//! `cargo run --example evaluate_trajectory estimated.txt groundtruth.txt`;
//! without arguments a scaled, rotated and noisy copy of a helix is scored.

use edgepoint_slam::dataset::load_groundtruth;
use edgepoint_slam::eval::{associate, ate_rmse, DEFAULT_MAX_DT};
use edgepoint_slam::geometry::exp_so3;
use edgepoint_slam::{TrajectoryRecord, Vec3};
use nalgebra::UnitQuaternion;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn demo() -> (Vec<TrajectoryRecord>, Vec<TrajectoryRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = Normal::new(0.0, 0.01).expect("finite sigma");
    let r = exp_so3(&Vec3::new(0.2, 1.0, -0.4));
    let record = |t: f64, position: Vec3| TrajectoryRecord { timestamp: t, position, orientation: UnitQuaternion::identity() };
    let gt: Vec<_> = (0..300).map(|i| {
        let a = i as f64 * 0.03;
        record(i as f64 / 30.0, Vec3::new(2.0 * a.cos(), 2.0 * a.sin(), 0.1 * a))
    }).collect();
    // estimate at a different rate, in its own frame and scale
    let est = gt
        .iter()
        .step_by(3)
        .map(|g| {
            let n = Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
            record(g.timestamp + 0.004, 0.3 * (r * (g.position + n)) + Vec3::new(5.0, -1.0, 2.0))
        })
        .collect();
    (est, gt)
}

fn main() -> edgepoint_slam::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (est, gt) = match args.as_slice() {
        [e, g] => (load_groundtruth(e.as_ref())?, load_groundtruth(g.as_ref())?),
        _ => demo(),
    };
    let pairs = associate(&est, &gt, DEFAULT_MAX_DT)?;
    let report = ate_rmse(&pairs)?;
    println!("{} of {} poses associated", report.pairs, est.len());
    println!("ATE rmse {:.3} cm, median {:.3} cm, max {:.3} cm", report.rmse_cm, report.median_cm, report.max_cm);
    println!("alignment scale {:.4}", report.alignment.scale);
    Ok(())
}
