//! Camera resection: EPnP inside RANSAC, then Levenberg-Marquardt on the inliers.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ransac::{adaptive_iterations, draw};
use super::{exp_so3, orthonormalize, skew, Pose};
use crate::error::{Error, Result};
use crate::{Mat3, Vec2, Vec3};

const SAMPLE: usize = 6;

/// Control points of the world cloud: centroid plus principal axes.
fn control_points(world: &[Vec3]) -> [Vec3; 4] {
    let n = world.len() as f64;
    let c0 = world.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for p in world {
        let d = p - c0;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let largest = (eig.eigenvalues[order[0]] / n).max(0.0).sqrt().max(1e-9);
    let mut cps = [c0; 4];
    for (k, &i) in order.iter().enumerate() {
        // planar clouds still get a non-degenerate third control point
        let s = (eig.eigenvalues[i] / n).max(0.0).sqrt().max(1e-3 * largest);
        cps[k + 1] = c0 + eig.eigenvectors.column(i).into_owned() * s;
    }
    cps
}

fn barycentric(world: &[Vec3], cps: &[Vec3; 4]) -> Option<Vec<[f64; 4]>> {
    let basis = Mat3::from_columns(&[cps[1] - cps[0], cps[2] - cps[0], cps[3] - cps[0]]);
    let inv = basis.try_inverse()?;
    Some(
        world
            .iter()
            .map(|p| {
                let a = inv * (p - cps[0]);
                [1.0 - a.x - a.y - a.z, a.x, a.y, a.z]
            })
            .collect(),
    )
}

const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

fn control_point_of(v: &SVector<f64, 12>, k: usize) -> Vec3 {
    Vec3::new(v[3 * k], v[3 * k + 1], v[3 * k + 2])
}

/// Rigid alignment `cam = R world + t` (no scale).
fn rigid_fit(world: &[Vec3], cam: &[Vec3]) -> Option<(Mat3, Vec3)> {
    let n = world.len() as f64;
    let cw = world.iter().sum::<Vec3>() / n;
    let cc = cam.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (w, c) in world.iter().zip(cam) {
        h += (c - cc) * (w - cw).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    Some((r, cc - r * cw))
}

fn reprojection_sq(pose: &Pose, p: &Vec3, x: &Vec2) -> f64 {
    match pose.project_normalized(p) {
        Some(q) => (q - x).norm_squared(),
        None => f64::INFINITY,
    }
}

/// EPnP on normalized observations (at least 4). Returns the pose with the
/// lowest reprojection error among the 1-, 2-, 3- and 4-vector solutions.
pub fn epnp(world: &[Vec3], image: &[Vec2]) -> Result<Pose> {
    let n = world.len();
    if n < 4 || image.len() != n {
        return Err(Error::NotEnoughData { needed: 4, got: n.min(image.len()) });
    }
    let cps = control_points(world);
    let alphas = barycentric(world, &cps).ok_or_else(|| Error::Degenerate("control points coplanar".into()))?;
    let mut m = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (a, x)) in alphas.iter().zip(image).enumerate() {
        for k in 0..4 {
            m[(2 * i, 3 * k)] = a[k];
            m[(2 * i, 3 * k + 2)] = -a[k] * x.x;
            m[(2 * i + 1, 3 * k + 1)] = a[k];
            m[(2 * i + 1, 3 * k + 2)] = -a[k] * x.y;
        }
    }
    let mtm = SMatrix::<f64, 12, 12>::from_iterator((m.transpose() * &m).iter().copied());
    let eig = mtm.symmetric_eigen();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let null: Vec<SVector<f64, 12>> = order[..4].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    // distance constraints: 6 pairs x 10 beta products
    let mut l = SMatrix::<f64, 6, 10>::zeros();
    let mut rho = SVector::<f64, 6>::zeros();
    for (r, &(a, b)) in PAIRS.iter().enumerate() {
        let dv: Vec<Vec3> = null.iter().map(|v| control_point_of(v, a) - control_point_of(v, b)).collect();
        // b11 b12 b22 b13 b23 b33 b14 b24 b34 b44
        let mut c = 0;
        for j in 0..4 {
            for i in 0..=j {
                let f = if i == j { 1.0 } else { 2.0 };
                l[(r, c)] = f * dv[i].dot(&dv[j]);
                c += 1;
            }
        }
        rho[r] = (cps[a] - cps[b]).norm_squared();
    }
    let sub_solve = |cols: &[usize]| -> Option<DVector<f64>> {
        let mut a = DMatrix::<f64>::zeros(6, cols.len());
        for (k, &c) in cols.iter().enumerate() {
            a.set_column(k, &l.column(c));
        }
        let svd = a.svd(true, true);
        svd.solve(&DVector::from_column_slice(rho.as_slice()), 1e-12).ok()
    };

    let mut guesses: Vec<[f64; 4]> = Vec::new();
    // N = 1 (with the 4-vector linearization b11 b12 b13 b14)
    if let Some(s) = sub_solve(&[0, 1, 3, 6]) {
        let b1 = s[0].abs().sqrt();
        if b1 > 0.0 {
            let sign = if s[0] < 0.0 { -1.0 } else { 1.0 };
            guesses.push([b1, s[1] / b1 * sign, s[2] / b1 * sign, s[3] / b1 * sign]);
        }
    }
    // N = 2
    if let Some(s) = sub_solve(&[0, 1, 2]) {
        let b1 = s[0].abs().sqrt();
        let b2 = s[2].abs().sqrt() * if s[1] * s[0] < 0.0 { -1.0 } else { 1.0 };
        guesses.push([b1, b2, 0.0, 0.0]);
    }
    // N = 3
    if let Some(s) = sub_solve(&[0, 1, 2, 3, 4]) {
        let b1 = s[0].abs().sqrt();
        let b2 = s[2].abs().sqrt() * if s[1] * s[0] < 0.0 { -1.0 } else { 1.0 };
        let b3 = if b1 > 0.0 { s[3] / b1 } else { 0.0 };
        guesses.push([b1, b2, b3, 0.0]);
    }

    let mut best: Option<(f64, Pose)> = None;
    for g in guesses {
        let betas = refine_betas(&l, &rho, g);
        let v: SVector<f64, 12> = null.iter().zip(betas.iter()).map(|(v, b)| v * *b).sum();
        let cam_cps: Vec<Vec3> = (0..4).map(|k| control_point_of(&v, k)).collect();
        let mut cam: Vec<Vec3> = alphas
            .iter()
            .map(|a| cam_cps.iter().zip(a).map(|(c, w)| c * *w).sum())
            .collect();
        if cam.iter().filter(|p| p.z < 0.0).count() * 2 > n {
            cam.iter_mut().for_each(|p| *p = -*p);
        }
        let Some((r, t)) = rigid_fit(world, &cam) else { continue };
        let pose = Pose::from_rt(r, t);
        let err: f64 = world.iter().zip(image).map(|(p, x)| reprojection_sq(&pose, p, x)).sum();
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| Error::EstimationFailed("EPnP found no solution".into()))
}

/// Gauss-Newton on the four betas against the control-point distances.
fn refine_betas(l: &SMatrix<f64, 6, 10>, rho: &SVector<f64, 6>, init: [f64; 4]) -> [f64; 4] {
    let products = |b: &[f64; 4]| -> SVector<f64, 10> {
        let mut p = SVector::<f64, 10>::zeros();
        let mut c = 0;
        for j in 0..4 {
            for i in 0..=j {
                p[c] = b[i] * b[j];
                c += 1;
            }
        }
        p
    };
    let mut b = init;
    for _ in 0..10 {
        let r = l * products(&b) - rho;
        let mut jac = SMatrix::<f64, 6, 4>::zeros();
        for k in 0..4 {
            let mut c = 0;
            let mut dp = SVector::<f64, 10>::zeros();
            for j in 0..4 {
                for i in 0..=j {
                    dp[c] = if i == k && j == k {
                        2.0 * b[k]
                    } else if i == k {
                        b[j]
                    } else if j == k {
                        b[i]
                    } else {
                        0.0
                    };
                    c += 1;
                }
            }
            jac.set_column(k, &(l * dp));
        }
        let h = jac.transpose() * jac;
        let Some(step) = (h + SMatrix::<f64, 4, 4>::identity() * 1e-12 * h.trace()).cholesky().map(|c| c.solve(&(-jac.transpose() * r))) else {
            break;
        };
        let cand = [b[0] + step[0], b[1] + step[1], b[2] + step[2], b[3] + step[3]];
        if (l * products(&cand) - rho).norm_squared() >= r.norm_squared() {
            break;
        }
        b = cand;
    }
    b
}

/// Levenberg-Marquardt on the normalized reprojection error of `idx`.
pub fn refine_pose(pose: &Pose, world: &[Vec3], image: &[Vec2], idx: &[usize]) -> Pose {
    let cost = |p: &Pose| idx.iter().map(|&i| reprojection_sq(p, &world[i], &image[i])).sum::<f64>();
    let mut cur = *pose;
    let mut c = cost(&cur);
    let mut lambda = 1e-4;
    for _ in 0..50 {
        let mut h = SMatrix::<f64, 6, 6>::zeros();
        let mut g = SVector::<f64, 6>::zeros();
        for &i in idx {
            let xc = cur.transform(&world[i]);
            if xc.z <= 0.0 {
                continue;
            }
            let r = Vec2::new(xc.x / xc.z - image[i].x, xc.y / xc.z - image[i].y);
            let jp = SMatrix::<f64, 2, 3>::new(1.0 / xc.z, 0.0, -xc.x / (xc.z * xc.z), 0.0, 1.0 / xc.z, -xc.y / (xc.z * xc.z));
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * -skew(&xc)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp * -cur.rotation));
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let mut accepted = false;
        for _ in 0..8 {
            let mut damped = h;
            for k in 0..6 {
                damped[(k, k)] += lambda * (h[(k, k)] + 1e-12);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let cand = Pose::new(
                orthonormalize(&(exp_so3(&Vec3::new(step[0], step[1], step[2])) * cur.rotation)),
                cur.center + Vec3::new(step[3], step[4], step[5]),
            );
            let cc = cost(&cand);
            if cc < c {
                let done = c - cc <= 1e-16 * c.max(1e-300) || step.norm() < 1e-15;
                cur = cand;
                c = cc;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = !done;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || c == 0.0 {
            break;
        }
    }
    cur
}

#[derive(Clone, Debug)]
pub struct PnpEstimate {
    pub pose: Pose,
    pub inliers: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct PnpParams {
    pub max_iters: usize,
    pub confidence: f64,
    /// Reprojection threshold in normalized units.
    pub tol: f64,
    pub seed: u64,
    pub min_inliers: usize,
}

impl Default for PnpParams {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            confidence: 0.99,
            tol: 3.0 / 500.0,
            seed: 0,
            min_inliers: 30,
        }
    }
}

/// Image points lying on one line carry no information about the pose
/// component along that line's plane.
fn collinear(image: &[Vec2], idx: &[usize]) -> bool {
    if idx.len() < 3 {
        return true;
    }
    let n = idx.len() as f64;
    let c = idx.iter().map(|&i| image[i]).sum::<Vec2>() / n;
    let mut cov = nalgebra::Matrix2::<f64>::zeros();
    for &i in idx {
        let d = image[i] - c;
        cov += d * d.transpose();
    }
    let e = cov.symmetric_eigenvalues();
    let (lo, hi) = (e.min(), e.max());
    hi <= 0.0 || lo / hi < 1e-10
}

/// Robust resection from world points and normalized observations.
pub fn pnp_resection(world: &[Vec3], image: &[Vec2], params: &PnpParams) -> Result<PnpEstimate> {
    let n = world.len();
    if image.len() != n {
        return Err(Error::InvalidArgument("correspondence lists differ in length".into()));
    }
    if n < 4 {
        return Err(Error::NotEnoughData { needed: 4, got: n });
    }
    let all: Vec<usize> = (0..n).collect();
    if collinear(image, &all) {
        return Err(Error::Degenerate("image points are collinear".into()));
    }
    let tol2 = params.tol * params.tol;
    let k = SAMPLE.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(f64, Pose)> = None;
    let mut iters = params.max_iters;
    let mut it = 0;
    while it < iters {
        it += 1;
        let sample = draw(&mut rng, n, k);
        if collinear(image, &sample) {
            continue;
        }
        let sw: Vec<Vec3> = sample.iter().map(|&i| world[i]).collect();
        let si: Vec<Vec2> = sample.iter().map(|&i| image[i]).collect();
        let Ok(pose) = epnp(&sw, &si) else { continue };
        let mut score = 0.0;
        let mut count = 0;
        for i in 0..n {
            let e = reprojection_sq(&pose, &world[i], &image[i]);
            if e < tol2 {
                score += e;
                count += 1;
            } else {
                score += tol2;
            }
        }
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, pose));
            iters = iters.min(adaptive_iterations(count as f64 / n as f64, k, params.confidence, params.max_iters));
        }
    }
    let (_, pose) = best.ok_or_else(|| Error::EstimationFailed("no PnP hypothesis".into()))?;
    let inliers_of = |p: &Pose| -> Vec<usize> { (0..n).filter(|&i| reprojection_sq(p, &world[i], &image[i]) < tol2).collect() };
    let mut inliers = inliers_of(&pose);
    let mut pose = pose;
    for _ in 0..3 {
        if inliers.len() < 4 {
            break;
        }
        let refined = refine_pose(&pose, world, image, &inliers);
        let next = inliers_of(&refined);
        pose = refined;
        if next == inliers {
            break;
        }
        inliers = next;
    }
    if collinear(image, &inliers) {
        return Err(Error::Degenerate("inlier image points are collinear".into()));
    }
    if inliers.len() < params.min_inliers {
        return Err(Error::EstimationFailed(format!(
            "{} PnP inliers, need {}",
            inliers.len(),
            params.min_inliers
        )));
    }
    Ok(PnpEstimate { pose, inliers })
}
