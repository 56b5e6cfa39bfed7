use nalgebra::{Matrix3x4, SMatrix};

use super::Pose;
use crate::error::{Error, Result};
use crate::{Mat3, Vec2, Vec3};

/// Linear triangulation from normalized observations. `None` when the
/// homogeneous solution lies at infinity.
pub fn triangulate_dlt(views: &[(Pose, Vec2)]) -> Option<Vec3> {
    if views.len() < 2 {
        return None;
    }
    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (k, (pose, x)) in views.iter().enumerate() {
        let p: Matrix3x4<f64> = {
            let mut m = Matrix3x4::zeros();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
            m.set_column(3, &pose.translation());
            m
        };
        for j in 0..4 {
            a[(2 * k, j)] = x.x * p[(2, j)] - p[(0, j)];
            a[(2 * k + 1, j)] = x.y * p[(2, j)] - p[(1, j)];
        }
    }
    let ata: SMatrix<f64, 4, 4> = SMatrix::from_iterator((a.transpose() * &a).iter().copied());
    let eig = ata.symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = eig.eigenvectors.column(imin);
    if h[3].abs() < 1e-12 * h.norm() {
        return None;
    }
    Some(Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triangulated {
    pub point: Vec3,
    /// Reprojection error per view, normalized image units.
    pub errors: Vec<f64>,
    /// Largest angle between viewing rays, degrees.
    pub parallax_deg: f64,
}

fn reprojection(pose: &Pose, x: &Vec2, p: &Vec3) -> Option<Vec2> {
    pose.project_normalized(p).map(|q| q - x)
}

/// Largest pairwise angle between the rays through the observations.
pub fn ray_parallax_deg(views: &[(Pose, Vec2)], point: Option<&Vec3>) -> f64 {
    let rays: Vec<Vec3> = views
        .iter()
        .map(|(pose, x)| match point {
            Some(p) => (p - pose.center).normalize(),
            None => (pose.rotation.transpose() * Vec3::new(x.x, x.y, 1.0)).normalize(),
        })
        .collect();
    let mut best = 0.0f64;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            best = best.max(super::angle_between(&rays[i], &rays[j]));
        }
    }
    best.to_degrees()
}

/// Triangulates one point from two or more normalized observations: DLT,
/// then Gauss-Newton on the reprojection errors. Fails on insufficient
/// parallax or if the point ends up behind any camera.
pub fn triangulate(views: &[(Pose, Vec2)], min_parallax_deg: f64) -> Result<Triangulated> {
    if views.len() < 2 {
        return Err(Error::NotEnoughData {
            needed: 2,
            got: views.len(),
        });
    }
    let baseline = views.iter().skip(1).map(|(p, _)| (p.center - views[0].0.center).norm()).fold(0.0, f64::max);
    if baseline == 0.0 {
        return Err(Error::Degenerate("identical camera centres".into()));
    }
    let mut p = triangulate_dlt(views).ok_or_else(|| Error::Degenerate("point at infinity".into()))?;
    let parallax = ray_parallax_deg(views, Some(&p));
    if !(parallax >= min_parallax_deg) {
        return Err(Error::Degenerate(format!("parallax {parallax:.3} deg below {min_parallax_deg}")));
    }
    for _ in 0..10 {
        let mut h = Mat3::zeros();
        let mut g = Vec3::zeros();
        for (pose, x) in views {
            let c = pose.transform(&p);
            if c.z <= 0.0 {
                break;
            }
            let r = Vec2::new(c.x / c.z - x.x, c.y / c.z - x.y);
            let jp = SMatrix::<f64, 2, 3>::new(1.0 / c.z, 0.0, -c.x / (c.z * c.z), 0.0, 1.0 / c.z, -c.y / (c.z * c.z));
            let j = jp * pose.rotation;
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let Some(step) = h.cholesky().map(|ch| ch.solve(&(-g))) else {
            break;
        };
        p += step;
        if step.norm() < 1e-14 * (1.0 + p.norm()) {
            break;
        }
    }
    let mut errors = Vec::with_capacity(views.len());
    for (pose, x) in views {
        match reprojection(pose, x, &p) {
            Some(r) => errors.push(r.norm()),
            None => return Err(Error::Degenerate("point behind camera".into())),
        }
    }
    Ok(Triangulated {
        point: p,
        errors,
        parallax_deg: ray_parallax_deg(views, Some(&p)),
    })
}
