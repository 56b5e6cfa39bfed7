//! Five-point RANSAC between two views and EPnP resection of a third.

use edgepoint_slam::geometry::{exp_so3, five_point_ransac, pnp_resection, rotation_angle, EssentialParams, PnpParams};
use edgepoint_slam::{Pose, Vec2, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> edgepoint_slam::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let world: Vec<Vec3> = (0..300)
        .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(4.0..8.0)))
        .collect();
    let first = Pose::identity();
    let second = Pose::new(exp_so3(&Vec3::new(0.02, -0.1, 0.03)), Vec3::new(0.5, 0.05, 0.1));
    let third = Pose::new(exp_so3(&Vec3::new(-0.04, -0.2, 0.0)), Vec3::new(1.0, -0.1, 0.3));

    // outliers are displaced vertically, across the mostly horizontal epipolar lines
    let project = |pose: &Pose, outlier_rate: f64, rng: &mut ChaCha8Rng| -> Vec<Vec2> {
        world
            .iter()
            .map(|p| {
                let n = pose.project_normalized(p).expect("in front");
                if rng.random_bool(outlier_rate) {
                    n + Vec2::new(rng.random_range(-0.05..0.05), rng.random_range(0.05..0.2))
                } else {
                    n
                }
            })
            .collect()
    };
    let a = project(&first, 0.0, &mut rng);
    let b = project(&second, 0.2, &mut rng);
    let c = project(&third, 0.2, &mut rng);

    let est = five_point_ransac(&a, &b, &EssentialParams::default())?;
    // the first camera is the world frame
    let (r_true, t_true) = (second.rotation, second.translation());
    println!("five-point: {} inliers of {}", est.inliers.len(), a.len());
    println!(
        "  rotation error {:.2e} deg, direction error {:.2e} deg",
        rotation_angle(&(est.pose.rotation * r_true.transpose())),
        est.pose.direction.angle(&t_true.normalize()).to_degrees()
    );

    let pnp = pnp_resection(&world, &c, &PnpParams::default())?;
    println!("EPnP: {} inliers, centre error {:.2e}", pnp.inliers.len(), (pnp.pose.center - third.center).norm());
    Ok(())
}
