//! Levenberg-Marquardt bundle adjustment of a perturbed scene; the normal
//! equations are solved through the Schur complement on the cameras.

use edgepoint_slam::ba::{lm_minimize, project, BaCamera, BaProblem, CameraMode, LmOptions, Observation};
use edgepoint_slam::geometry::exp_so3;
use edgepoint_slam::synthetic::look_at;
use edgepoint_slam::{CameraIntrinsics, Pose, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0, r: 0.0 };
    let truth_points: Vec<Vec3> = (0..200).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let truth_cams: Vec<Pose> = (0..6).map(|i| look_at(Vec3::new(-1.5 + 0.6 * i as f64, 0.2, -5.0), Vec3::zeros())).collect();

    let mut observations = Vec::new();
    for (c, pose) in truth_cams.iter().enumerate() {
        for (p, x) in truth_points.iter().enumerate() {
            if let Some(pixel) = project(pose, x, &k) {
                observations.push(Observation { camera: c, point: p, pixel });
            }
        }
    }
    // the first two cameras fix the gauge
    let cameras = truth_cams
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let pose = if i < 2 { *pose } else { Pose::new(exp_so3(&Vec3::new(0.01, -0.01, 0.005)) * pose.rotation, pose.center + Vec3::new(0.05, -0.03, 0.04)) };
            BaCamera { pose, mode: if i < 2 { CameraMode::Fixed } else { CameraMode::Free } }
        })
        .collect();
    let points = truth_points.iter().map(|p| p + Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05))).collect();
    let problem = BaProblem { cameras, points, observations, intrinsics: k, literal_distortion: false };

    let (solved, report) = lm_minimize(&problem, &LmOptions::default());
    println!("{} observations, {} LM iterations", problem.observations.len(), report.iterations);
    println!("RMS reprojection {:.3} px -> {:.2e} px", problem.rms(), solved.rms());
    let worst = solved.cameras.iter().zip(&truth_cams).map(|(a, b)| (a.pose.center - b.center).norm()).fold(0.0, f64::max);
    println!("worst camera centre error {worst:.2e}");
}
