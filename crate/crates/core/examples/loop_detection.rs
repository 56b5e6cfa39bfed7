//! Loop-closure building blocks: moment signatures of edge shapes and the
//! robust similarity that ties a drifted revisit back to the map.

use edgepoint_slam::edges::EdgeMask;
use edgepoint_slam::geometry::{exp_so3, horn_similarity_ransac};
use edgepoint_slam::loop_closure::moment_signature;
use edgepoint_slam::synthetic::rasterize_polyline;
use edgepoint_slam::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn outline(points: &[(f64, f64)], shift: (f64, f64), quarter_turn: bool) -> EdgeMask {
    let mut m = EdgeMask::new(200, 200);
    let placed: Vec<(f64, f64)> = points
        .iter()
        .map(|&(x, y)| if quarter_turn { (-y, x) } else { (x, y) })
        .map(|(x, y)| (x + shift.0, y + shift.1))
        .collect();
    rasterize_polyline(&mut m, &placed, true);
    m
}

fn main() -> edgepoint_slam::Result<()> {
    let house = [(-30.0, 30.0), (30.0, 30.0), (30.0, -10.0), (0.0, -40.0), (-30.0, -10.0)];
    let arrow = [(-40.0, 10.0), (10.0, 10.0), (10.0, 30.0), (40.0, 0.0), (10.0, -30.0), (10.0, -10.0), (-40.0, -10.0)];
    let reference = moment_signature(&outline(&house, (80.0, 80.0), false))?;
    let revisit = moment_signature(&outline(&house, (120.0, 100.0), true))?;
    let other = moment_signature(&outline(&arrow, (100.0, 100.0), false))?;
    println!("signature distance to a moved, turned copy: {:.4}", reference.l1(&revisit));
    println!("signature distance to a different shape:     {:.4}", reference.l1(&other));

    // map points seen again after drift: scale 1.2, a small rotation, an offset and 30% wrong matches
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let early: Vec<Vec3> = (0..300).map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..7.0))).collect();
    let drift = exp_so3(&Vec3::new(0.03, 0.1, -0.02));
    let late: Vec<Vec3> = early
        .iter()
        .map(|p| if rng.random_bool(0.3) { p + Vec3::new(rng.random_range(-2.0..2.0), 0.0, rng.random_range(-2.0..2.0)) } else { 1.2 * (drift * p) + Vec3::new(0.4, -0.1, 0.2) })
        .collect();
    let fit = horn_similarity_ransac(&late, &early, 0.02, 500, 1)?;
    println!("loop similarity: scale {:.4} (true {:.4}), {} of {} pairs agree", fit.similarity.scale, 1.0 / 1.2, fit.inliers.len(), early.len());
    Ok(())
}
