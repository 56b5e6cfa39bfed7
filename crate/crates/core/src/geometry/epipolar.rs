use crate::dataset::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::{Mat3, Vec2, Vec3};

/// Which image the line lives in: `Forward` maps a point of the first view
/// to a line in the second (`F x`), `Backward` the reverse (`F^T x`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Epipolar line `(a, b, c)` with `a^2 + b^2 = 1`, so `l . (x, y, 1)` is a
/// signed pixel distance.
pub fn epiline(f: &Mat3, x: &Vec2, direction: Direction) -> Result<Vec3> {
    let h = Vec3::new(x.x, x.y, 1.0);
    let l = match direction {
        Direction::Forward => f * h,
        Direction::Backward => f.transpose() * h,
    };
    let n = (l.x * l.x + l.y * l.y).sqrt();
    if !(n > 1e-12 * f.norm()) {
        return Err(Error::Degenerate("epiline undefined at the epipole".into()));
    }
    Ok(l / n)
}

pub fn intrinsic_matrix(k: &CameraIntrinsics) -> Mat3 {
    Mat3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0)
}

/// `F = K^-T E K^-1` for a single camera.
pub fn essential_to_fundamental(e: &Mat3, k: &CameraIntrinsics) -> Mat3 {
    let kinv = intrinsic_matrix(k).try_inverse().expect("intrinsics invertible");
    kinv.transpose() * e * kinv
}

/// Numerical rank with singular values below `1e-9 * s_max` treated as zero.
pub fn fundamental_rank(f: &Mat3) -> usize {
    let s = f.singular_values();
    let max = s.max();
    if max == 0.0 {
        return 0;
    }
    s.iter().filter(|v| **v > 1e-9 * max).count()
}
