//! Multi-view geometry kernels.

mod epipolar;
mod five_point;
mod pnp;
mod ransac;
mod similarity;
mod triangulation;

pub use epipolar::{epiline, intrinsic_matrix, essential_to_fundamental, fundamental_rank, Direction};
pub use five_point::{decompose_essential, five_point_ransac, solve_five_point, EssentialEstimate, EssentialParams};
pub use pnp::{epnp, pnp_resection, refine_pose, PnpEstimate, PnpParams};
pub use ransac::adaptive_iterations;
pub use similarity::{horn_similarity, horn_similarity_ransac, SimilarityEstimate};
pub use triangulation::{ray_parallax_deg, triangulate, triangulate_dlt, Triangulated};

use nalgebra::{Rotation3, Unit};

use crate::{Mat3, Vec2, Vec3};

/// Camera pose: `rotation` maps world to camera, `center` is the camera
/// centre in world coordinates. The translation is `t = -R C`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub center: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            center: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, center: Vec3) -> Self {
        Self { rotation, center }
    }

    pub fn from_rt(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            center: -rotation.transpose() * translation,
        }
    }

    pub fn translation(&self) -> Vec3 {
        -self.rotation * self.center
    }

    pub fn transform(&self, world: &Vec3) -> Vec3 {
        self.rotation * (world - self.center)
    }

    /// Normalized image coordinate of a world point, `None` behind the camera.
    pub fn project_normalized(&self, world: &Vec3) -> Option<Vec2> {
        let c = self.transform(world);
        (c.z > 0.0).then(|| Vec2::new(c.x / c.z, c.y / c.z))
    }

    /// Camera optical axis in world coordinates (third row of R).
    pub fn viewing_direction(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    /// Pose of `other` relative to `self`: rotation `R_o R_s^T` and the
    /// centre of `other` expressed in the frame of `self`.
    pub fn relative_to(&self, other: &Pose) -> (Mat3, Vec3) {
        (
            other.rotation * self.rotation.transpose(),
            self.rotation * (other.center - self.center),
        )
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Mat3::identity()).amax() < tol && (r.determinant() - 1.0).abs() < tol
    }
}

/// Relative motion between two calibrated views up to scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePose {
    /// Maps points in frame a to frame b.
    pub rotation: Mat3,
    /// Unit translation of the b frame: `X_b = R X_a + direction * s`.
    pub direction: Vec3,
}

impl RelativePose {
    /// Poses of the two views with the first at the origin and unit baseline.
    pub fn to_poses(&self) -> (Pose, Pose) {
        (Pose::identity(), Pose::from_rt(self.rotation, self.direction))
    }
}

/// `q = scale * R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    pub fn compose(&self, inner: &Similarity) -> Self {
        Self {
            scale: self.scale * inner.scale,
            rotation: self.rotation * inner.rotation,
            translation: self.scale * (self.rotation * inner.translation) + self.translation,
        }
    }

    /// Moves a camera with the scene: centres are mapped, orientations
    /// counter-rotated so projections of mapped points are unchanged.
    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        Pose {
            rotation: pose.rotation * self.rotation.transpose(),
            center: self.apply(&pose.center),
        }
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix from an angle-axis vector.
pub fn exp_so3(w: &Vec3) -> Mat3 {
    Rotation3::new(*w).into_inner()
}

/// Angle-axis vector of a rotation matrix.
pub fn log_so3(r: &Mat3) -> Vec3 {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Rotation angle in degrees, `acos((trace - 1) / 2)` clamped to [0, 180].
pub fn rotation_angle(r: &Mat3) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos loses precision near 0; recover the angle from the antisymmetric part there.
    let s = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    s.atan2(c).to_degrees().clamp(0.0, 180.0)
}

/// Closest rotation in Frobenius norm.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u");
    let vt = svd.v_t.expect("v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

/// Angle between two directions in radians.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    let c = a.cross(b).norm();
    c.atan2(a.dot(b))
}

pub fn unit(v: Vec3) -> Vec3 {
    Unit::new_normalize(v).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_angle_cases() {
        assert_eq!(rotation_angle(&Mat3::identity()), 0.0);
        for axis in [Vec3::x(), Vec3::new(1.0, 2.0, -0.5).normalize(), Vec3::z()] {
            let r = exp_so3(&(axis * 15f64.to_radians()));
            assert!((rotation_angle(&r) - 15.0).abs() < 1e-9);
            assert!((rotation_angle(&r.transpose()) - rotation_angle(&r)).abs() < 1e-12);
        }
        let r = exp_so3(&(Vec3::y() * std::f64::consts::PI));
        assert!((rotation_angle(&r) - 180.0).abs() < 1e-6);
    }

    #[test]
    fn pose_translation_convention() {
        let r = exp_so3(&Vec3::new(0.1, -0.2, 0.3));
        let p = Pose::new(r, Vec3::new(1.0, 2.0, 3.0));
        assert!((p.translation() + r * p.center).norm() < 1e-15);
        assert!(p.transform(&p.center).norm() < 1e-12);
        let q = Pose::from_rt(r, p.translation());
        assert!((q.center - p.center).norm() < 1e-12);
    }

    #[test]
    fn relative_center_composition() {
        // C_b = C_a + R_a^T * (centre of b in a's frame)
        let a = Pose::new(exp_so3(&Vec3::new(0.3, 0.1, -0.4)), Vec3::new(1.0, -2.0, 0.5));
        let b = Pose::new(exp_so3(&Vec3::new(-0.2, 0.5, 0.1)), Vec3::new(-1.0, 0.0, 2.0));
        let (r_ab, c_b_in_a) = a.relative_to(&b);
        assert!((a.center + a.rotation.transpose() * c_b_in_a - b.center).norm() < 1e-12);
        assert!((r_ab * a.rotation - b.rotation).amax() < 1e-12);
    }

    #[test]
    fn similarity_inverse_and_pose() {
        let s = Similarity {
            scale: 2.5,
            rotation: exp_so3(&Vec3::new(0.2, 0.4, -0.1)),
            translation: Vec3::new(1.0, 2.0, 3.0),
        };
        let p = Vec3::new(-0.3, 0.7, 1.1);
        assert!((s.inverse().apply(&s.apply(&p)) - p).norm() < 1e-12);
        let cam = Pose::new(exp_so3(&Vec3::new(0.0, 0.3, 0.0)), Vec3::new(0.0, 0.0, -4.0));
        let moved = s.apply_pose(&cam);
        let x = Vec3::new(0.2, -0.1, 0.5);
        let a = cam.project_normalized(&x).unwrap();
        let b = moved.project_normalized(&s.apply(&x)).unwrap();
        assert!((a - b).norm() < 1e-12);
    }
}
