//! Bidirectional pyramidal Lucas-Kanade on a translated texture.

use edgepoint_slam::flow::{bidirectional_filter, pyramidal_lk, FlowParams};
use edgepoint_slam::{ImageFrame, Vec2};

fn texture(x: f64, y: f64) -> u8 {
    let v = 128.0 + 50.0 * (0.11 * x).sin() * (0.07 * y).cos() + 40.0 * (0.05 * x + 0.09 * y).sin();
    v.round().clamp(0.0, 255.0) as u8
}

fn frame(index: usize, shift: Vec2) -> ImageFrame {
    let (w, h) = (320, 240);
    let px = (0..w * h).map(|i| texture((i % w) as f64 - shift.x, (i / w) as f64 - shift.y)).collect();
    ImageFrame::new(index, index as f64, w, h, px).expect("consistent size")
}

fn main() -> edgepoint_slam::Result<()> {
    let motion = Vec2::new(6.3, -2.8);
    let (a, b) = (frame(0, Vec2::zeros()), frame(1, motion));
    let points: Vec<Vec2> = (0..10).flat_map(|i| (0..8).map(move |j| Vec2::new(40.0 + 25.0 * i as f64, 30.0 + 25.0 * j as f64))).collect();

    let params = FlowParams::default();
    let forward = pyramidal_lk(&a, &b, &points, &params)?;
    let returned: Vec<Vec2> = forward.iter().map(|r| r.position).collect();
    let backward = pyramidal_lk(&b, &a, &returned, &params)?;
    let kept = bidirectional_filter(&points, &forward, &backward, params.bidir_tol);

    let worst = kept.iter().map(|&i| (forward[i].position - points[i] - motion).norm()).fold(0.0, f64::max);
    println!("{} of {} points pass the forward-backward check", kept.len(), points.len());
    println!("true motion ({:.1}, {:.1}) px, worst tracking error {worst:.3} px", motion.x, motion.y);
    Ok(())
}
