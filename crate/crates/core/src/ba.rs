//! Sparse Levenberg-Marquardt bundle adjustment over keyframe poses and
//! map points, with a Huber loss and a Schur-complement solver.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector};

use std::collections::{BTreeMap, BTreeSet};

use crate::config::BaConfig;
use crate::dataset::CameraIntrinsics;
use crate::map::{KeyframeId, PointId, SlamMap};
use crate::geometry::{exp_so3, orthonormalize, skew, unit, Pose};
use crate::{Vec2, Vec3};

type Mat6 = SMatrix<f64, 6, 6>;
type Mat63 = SMatrix<f64, 6, 3>;
type Mat26 = SMatrix<f64, 2, 6>;
type Mat23 = SMatrix<f64, 2, 3>;
type Vec6 = SVector<f64, 6>;

/// Residual assigned to a point behind its camera, pixels per axis.
const BEHIND_CAMERA_RESIDUAL: f64 = 1.0e4;

/// Which pose parameters are free.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CameraMode {
    /// Rotation and centre (6 parameters).
    Free,
    /// Held constant.
    Fixed,
    /// Rotation free, centre constrained to the sphere of `radius` about
    /// `anchor` (5 parameters). Fixes the scale gauge.
    CenterOnSphere { anchor: Vec3, radius: f64 },
}

impl CameraMode {
    pub fn dim(&self) -> usize {
        match self {
            CameraMode::Free => 6,
            CameraMode::Fixed => 0,
            CameraMode::CenterOnSphere { .. } => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaCamera {
    pub pose: Pose,
    pub mode: CameraMode,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub camera: usize,
    pub point: usize,
    /// Measured pixel.
    pub pixel: Vec2,
}

#[derive(Clone, Debug)]
pub struct BaProblem {
    pub cameras: Vec<BaCamera>,
    pub points: Vec<Vec3>,
    pub observations: Vec<Observation>,
    /// Focal length and radial coefficient are held fixed.
    pub intrinsics: CameraIntrinsics,
    /// Apply the radial factor to the measurement instead of the prediction.
    pub literal_distortion: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct LmOptions {
    pub max_iters: usize,
    pub initial_damping: f64,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub function_tol: f64,
    /// Stop when the step norm relative to the parameter norm falls below this.
    pub parameter_tol: f64,
    /// Huber threshold, pixels.
    pub huber_delta: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            initial_damping: 1e-4,
            function_tol: 1e-12,
            parameter_tol: 1e-12,
            huber_delta: 2.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LmReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
    pub converged: bool,
    pub diagnostic: Option<String>,
}

/// Pixel of a world point: `f * u * Psi(u) + c` with `u` the normalized
/// coordinate and `Psi(u) = 1 + r |u|^2`. `None` for non-positive depth.
pub fn project(pose: &Pose, point: &Vec3, k: &CameraIntrinsics) -> Option<Vec2> {
    let c = pose.transform(point);
    if c.z <= 0.0 {
        return None;
    }
    let u = Vec2::new(c.x / c.z, c.y / c.z);
    let psi = 1.0 + k.r * u.norm_squared();
    Some(Vec2::new(k.fx * u.x * psi + k.cx, k.fy * u.y * psi + k.cy))
}

/// Pinhole pixel without the radial factor.
fn project_pinhole(pose: &Pose, point: &Vec3, k: &CameraIntrinsics) -> Option<Vec2> {
    let c = pose.transform(point);
    (c.z > 0.0).then(|| Vec2::new(k.fx * (c.x / c.z) + k.cx, k.fy * (c.y / c.z) + k.cy))
}

/// The measurement scaled by the radial factor of its own normalized coordinate.
pub fn distort_measurement(pixel: &Vec2, k: &CameraIntrinsics) -> Vec2 {
    let u = Vec2::new((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy);
    let c = Vec2::new(k.cx, k.cy);
    pixel + (pixel - c) * (k.r * u.norm_squared())
}

/// Orthonormal basis of the plane perpendicular to `n`.
fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let a = unit(n.cross(&helper));
    (a, n.cross(&a))
}

/// Maps the camera's reduced parameters to (rotation increment, centre increment).
fn camera_basis(cam: &BaCamera) -> Mat6 {
    let mut b = Mat6::zeros();
    match cam.mode {
        CameraMode::Free => b = Mat6::identity(),
        CameraMode::Fixed => {}
        CameraMode::CenterOnSphere { anchor, radius } => {
            for i in 0..3 {
                b[(i, i)] = 1.0;
            }
            let d = cam.pose.center - anchor;
            let (t1, t2) = tangent_basis(&unit(d));
            let s = radius / d.norm();
            for i in 0..3 {
                b[(3 + i, 3)] = t1[i] * s;
                b[(3 + i, 4)] = t2[i] * s;
            }
        }
    }
    b
}

fn update_camera(cam: &BaCamera, delta: &[f64]) -> BaCamera {
    match cam.mode {
        CameraMode::Fixed => cam.clone(),
        CameraMode::Free => BaCamera {
            pose: Pose::new(
                orthonormalize(&(exp_so3(&Vec3::new(delta[0], delta[1], delta[2])) * cam.pose.rotation)),
                cam.pose.center + Vec3::new(delta[3], delta[4], delta[5]),
            ),
            mode: cam.mode,
        },
        CameraMode::CenterOnSphere { anchor, radius } => {
            let d = cam.pose.center - anchor;
            let (t1, t2) = tangent_basis(&unit(d));
            let moved = d + t1 * delta[3] + t2 * delta[4];
            BaCamera {
                pose: Pose::new(
                    orthonormalize(&(exp_so3(&Vec3::new(delta[0], delta[1], delta[2])) * cam.pose.rotation)),
                    anchor + unit(moved) * radius,
                ),
                mode: cam.mode,
            }
        }
    }
}

/// Huber cost of a residual norm `s`.
fn huber(s: f64, delta: f64) -> f64 {
    if s <= delta {
        0.5 * s * s
    } else {
        delta * (s - 0.5 * delta)
    }
}

fn huber_weight(s: f64, delta: f64) -> f64 {
    if s <= delta {
        1.0
    } else {
        delta / s
    }
}

/// Per-observation Jacobian blocks. `camera` is with respect to
/// (rotation increment, centre increment) before the mode basis is applied.
#[derive(Clone, Copy, Debug)]
pub struct ObservationJacobian {
    pub camera: Mat26,
    pub point: Mat23,
}

impl BaProblem {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            cameras: Vec::new(),
            points: Vec::new(),
            observations: Vec::new(),
            intrinsics,
            literal_distortion: false,
        }
    }

    pub fn camera_offsets(&self) -> (Vec<usize>, usize) {
        let mut off = Vec::with_capacity(self.cameras.len());
        let mut n = 0;
        for c in &self.cameras {
            off.push(n);
            n += c.mode.dim();
        }
        (off, n)
    }

    pub fn parameter_count(&self) -> usize {
        self.camera_offsets().1 + 3 * self.points.len()
    }

    /// Residual of one observation (prediction minus measurement), pixels.
    pub fn residual(&self, obs: &Observation) -> Option<Vec2> {
        let pose = &self.cameras[obs.camera].pose;
        let point = &self.points[obs.point];
        if self.literal_distortion {
            project_pinhole(pose, point, &self.intrinsics).map(|p| p - distort_measurement(&obs.pixel, &self.intrinsics))
        } else {
            project(pose, point, &self.intrinsics).map(|p| p - obs.pixel)
        }
    }

    pub fn residuals(&self) -> DVector<f64> {
        let mut r = DVector::zeros(2 * self.observations.len());
        for (k, obs) in self.observations.iter().enumerate() {
            let v = self
                .residual(obs)
                .unwrap_or_else(|| Vec2::new(BEHIND_CAMERA_RESIDUAL, BEHIND_CAMERA_RESIDUAL));
            r[2 * k] = v.x;
            r[2 * k + 1] = v.y;
        }
        r
    }

    /// Robust cost: sum of Huber penalties on the residual norms.
    pub fn cost(&self, delta: f64) -> f64 {
        let r = self.residuals();
        (0..self.observations.len())
            .map(|k| huber(Vec2::new(r[2 * k], r[2 * k + 1]).norm(), delta))
            .sum()
    }

    /// Root mean square of the residual norms.
    pub fn rms(&self) -> f64 {
        if self.observations.is_empty() {
            return 0.0;
        }
        (self.residuals().norm_squared() / self.observations.len() as f64).sqrt()
    }

    fn observation_jacobian(&self, obs: &Observation) -> ObservationJacobian {
        let pose = &self.cameras[obs.camera].pose;
        let xc = pose.transform(&self.points[obs.point]);
        if xc.z <= 0.0 {
            return ObservationJacobian {
                camera: Mat26::zeros(),
                point: Mat23::zeros(),
            };
        }
        let k = &self.intrinsics;
        let z = xc.z;
        let u = Vec2::new(xc.x / z, xc.y / z);
        let du = Mat23::new(1.0 / z, 0.0, -xc.x / (z * z), 0.0, 1.0 / z, -xc.y / (z * z));
        let dpix_du = if self.literal_distortion {
            nalgebra::Matrix2::new(k.fx, 0.0, 0.0, k.fy)
        } else {
            let psi = 1.0 + k.r * u.norm_squared();
            let inner = nalgebra::Matrix2::identity() * psi + u * u.transpose() * (2.0 * k.r);
            nalgebra::Matrix2::new(k.fx, 0.0, 0.0, k.fy) * inner
        };
        let dx = dpix_du * du;
        let mut camera = Mat26::zeros();
        camera.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dx * -skew(&xc)));
        camera.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dx * -pose.rotation));
        ObservationJacobian {
            camera,
            point: dx * pose.rotation,
        }
    }

    /// Residual vector and block-sparse Jacobian, one block pair per observation.
    pub fn residuals_and_jacobian(&self) -> (DVector<f64>, Vec<ObservationJacobian>) {
        let jac = self.observations.iter().map(|o| self.observation_jacobian(o)).collect();
        (self.residuals(), jac)
    }

    /// Dense Jacobian with respect to the reduced parameter vector
    /// (cameras in order, then points).
    pub fn dense_jacobian(&self) -> DMatrix<f64> {
        let (off, nc) = self.camera_offsets();
        let mut j = DMatrix::zeros(2 * self.observations.len(), nc + 3 * self.points.len());
        let bases: Vec<Mat6> = self.cameras.iter().map(camera_basis).collect();
        for (k, obs) in self.observations.iter().enumerate() {
            let bj = self.observation_jacobian(obs);
            let jc = bj.camera * bases[obs.camera];
            let dim = self.cameras[obs.camera].mode.dim();
            for r in 0..2 {
                for c in 0..dim {
                    j[(2 * k + r, off[obs.camera] + c)] = jc[(r, c)];
                }
                for c in 0..3 {
                    j[(2 * k + r, nc + 3 * obs.point + c)] = bj.point[(r, c)];
                }
            }
        }
        j
    }

    /// Applies a reduced parameter step.
    pub fn apply_step(&self, step: &DVector<f64>) -> BaProblem {
        let (off, nc) = self.camera_offsets();
        let mut out = self.clone();
        for (i, cam) in self.cameras.iter().enumerate() {
            let d = cam.mode.dim();
            if d > 0 {
                out.cameras[i] = update_camera(cam, &step.as_slice()[off[i]..off[i] + d]);
            }
        }
        for (i, p) in out.points.iter_mut().enumerate() {
            *p += Vec3::new(step[nc + 3 * i], step[nc + 3 * i + 1], step[nc + 3 * i + 2]);
        }
        out
    }

    /// Gauss-Newton normal equations with IRLS Huber weights.
    pub fn normal_equations(&self, huber_delta: f64) -> NormalEquations {
        let (off, nc) = self.camera_offsets();
        let bases: Vec<Mat6> = self.cameras.iter().map(camera_basis).collect();
        let ncam = self.cameras.len();
        let mut hcc = vec![Mat6::zeros(); ncam];
        let mut gc = vec![Vec6::zeros(); ncam];
        let mut hpp = vec![Matrix3::zeros(); self.points.len()];
        let mut gp = vec![Vec3::zeros(); self.points.len()];
        let mut hcp = Vec::with_capacity(self.observations.len());
        for obs in &self.observations {
            let Some(r) = self.residual(obs) else {
                hcp.push(Mat63::zeros());
                continue;
            };
            let w = huber_weight(r.norm(), huber_delta);
            let bj = self.observation_jacobian(obs);
            let jc = bj.camera * bases[obs.camera];
            let jp = bj.point;
            hcc[obs.camera] += jc.transpose() * jc * w;
            gc[obs.camera] += jc.transpose() * r * w;
            hpp[obs.point] += jp.transpose() * jp * w;
            gp[obs.point] += jp.transpose() * r * w;
            hcp.push(jc.transpose() * jp * w);
        }
        NormalEquations {
            camera_offsets: off,
            camera_dims: self.cameras.iter().map(|c| c.mode.dim()).collect(),
            camera_params: nc,
            hcc,
            gc,
            hpp,
            gp,
            hcp,
            links: self.observations.iter().map(|o| (o.camera, o.point)).collect(),
        }
    }

    /// Indices of observations whose residual norm exceeds `threshold` px or
    /// whose point is behind the camera.
    pub fn outlier_observations(&self, threshold: f64) -> Vec<usize> {
        self.observations
            .iter()
            .enumerate()
            .filter(|(_, o)| self.residual(o).is_none_or(|r| r.norm() > threshold))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Block form of `J^T W J` and `J^T W r`.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    camera_offsets: Vec<usize>,
    camera_dims: Vec<usize>,
    camera_params: usize,
    hcc: Vec<Mat6>,
    gc: Vec<Vec6>,
    hpp: Vec<Matrix3<f64>>,
    gp: Vec<Vec3>,
    hcp: Vec<Mat63>,
    links: Vec<(usize, usize)>,
}

/// Marquardt scaling of a diagonal entry.
fn damp(d: f64, lambda: f64) -> f64 {
    d + lambda * d.max(1e-9)
}

impl NormalEquations {
    pub fn size(&self) -> usize {
        self.camera_params + 3 * self.hpp.len()
    }

    /// Assembled dense system `(H + lambda diag(H)) x = -g`.
    pub fn dense(&self, lambda: f64) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.size();
        let nc = self.camera_params;
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for (j, blk) in self.hcc.iter().enumerate() {
            let (o, d) = (self.camera_offsets[j], self.camera_dims[j]);
            for a in 0..d {
                g[o + a] = self.gc[j][a];
                for b in 0..d {
                    h[(o + a, o + b)] = blk[(a, b)];
                }
            }
        }
        for (i, blk) in self.hpp.iter().enumerate() {
            for a in 0..3 {
                g[nc + 3 * i + a] = self.gp[i][a];
                for b in 0..3 {
                    h[(nc + 3 * i + a, nc + 3 * i + b)] = blk[(a, b)];
                }
            }
        }
        for (blk, &(j, i)) in self.hcp.iter().zip(&self.links) {
            let (o, d) = (self.camera_offsets[j], self.camera_dims[j]);
            for a in 0..d {
                for b in 0..3 {
                    h[(o + a, nc + 3 * i + b)] += blk[(a, b)];
                    h[(nc + 3 * i + b, o + a)] += blk[(a, b)];
                }
            }
        }
        for k in 0..n {
            h[(k, k)] = damp(h[(k, k)], lambda);
        }
        (h, g)
    }

    /// Reference solve of the full damped system.
    pub fn solve_dense(&self, lambda: f64) -> Option<DVector<f64>> {
        let (h, g) = self.dense(lambda);
        h.cholesky().map(|c| c.solve(&(-g)))
    }

    /// Solve by eliminating the point blocks (Schur complement on the cameras).
    pub fn solve_schur(&self, lambda: f64) -> Option<DVector<f64>> {
        let nc = self.camera_params;
        let np = self.hpp.len();
        let mut hpp_inv = Vec::with_capacity(np);
        for h in &self.hpp {
            let mut d = *h;
            for k in 0..3 {
                d[(k, k)] = damp(d[(k, k)], lambda);
            }
            hpp_inv.push(d.try_inverse()?);
        }
        let mut s = DMatrix::<f64>::zeros(nc, nc);
        let mut rhs = DVector::<f64>::zeros(nc);
        for (j, blk) in self.hcc.iter().enumerate() {
            let (o, d) = (self.camera_offsets[j], self.camera_dims[j]);
            for a in 0..d {
                rhs[o + a] = -self.gc[j][a];
                for b in 0..d {
                    s[(o + a, o + b)] = blk[(a, b)];
                }
                s[(o + a, o + a)] = damp(s[(o + a, o + a)], lambda);
            }
        }
        // Observations grouped by point.
        let mut by_point: Vec<Vec<usize>> = vec![Vec::new(); np];
        for (k, &(_, i)) in self.links.iter().enumerate() {
            by_point[i].push(k);
        }
        for (i, obs) in by_point.iter().enumerate() {
            let hinv = &hpp_inv[i];
            for &ka in obs {
                let ja = self.links[ka].0;
                let (oa, da) = (self.camera_offsets[ja], self.camera_dims[ja]);
                if da == 0 {
                    continue;
                }
                let w = self.hcp[ka] * hinv;
                let rv = w * self.gp[i];
                for a in 0..da {
                    rhs[oa + a] += rv[a];
                }
                for &kb in obs {
                    let jb = self.links[kb].0;
                    let (ob, db) = (self.camera_offsets[jb], self.camera_dims[jb]);
                    if db == 0 {
                        continue;
                    }
                    let m = w * self.hcp[kb].transpose();
                    for a in 0..da {
                        for b in 0..db {
                            s[(oa + a, ob + b)] -= m[(a, b)];
                        }
                    }
                }
            }
        }
        let dc = if nc > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
        let mut x = DVector::zeros(self.size());
        x.rows_mut(0, nc).copy_from(&dc);
        for (i, obs) in by_point.iter().enumerate() {
            let mut b = -self.gp[i];
            for &k in obs {
                let j = self.links[k].0;
                let (o, d) = (self.camera_offsets[j], self.camera_dims[j]);
                for a in 0..d {
                    b -= self.hcp[k].row(a).transpose() * dc[o + a];
                }
            }
            let dp = hpp_inv[i] * b;
            for a in 0..3 {
                x[nc + 3 * i + a] = dp[a];
            }
        }
        Some(x)
    }
}

/// Levenberg-Marquardt with Marquardt damping. Steps are accepted only when
/// the robust cost decreases, so the reported costs never increase.
pub fn lm_minimize(problem: &BaProblem, opts: &LmOptions) -> (BaProblem, LmReport) {
    let mut cur = problem.clone();
    let mut cost = cur.cost(opts.huber_delta);
    let mut report = LmReport {
        iterations: 0,
        initial_cost: cost,
        final_cost: cost,
        accepted_costs: vec![cost],
        converged: false,
        diagnostic: None,
    };
    if cur.parameter_count() == 0 || cur.observations.is_empty() {
        report.converged = true;
        return (cur, report);
    }
    let mut lambda = opts.initial_damping;
    while report.iterations < opts.max_iters {
        report.iterations += 1;
        let ne = cur.normal_equations(opts.huber_delta);
        let mut accepted = false;
        loop {
            if lambda > 1e16 {
                report.diagnostic = Some("damping overflow; returning best-so-far".into());
                break;
            }
            let Some(step) = ne.solve_schur(lambda) else {
                lambda *= 10.0;
                continue;
            };
            let cand = cur.apply_step(&step);
            let cand_cost = cand.cost(opts.huber_delta);
            if cand_cost < cost {
                let decrease = (cost - cand_cost) / cost.max(f64::MIN_POSITIVE);
                let scale = params_norm(&cur);
                cur = cand;
                cost = cand_cost;
                report.accepted_costs.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if decrease < opts.function_tol || step.norm() < opts.parameter_tol * (scale + opts.parameter_tol) {
                    report.converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no decrease possible at any damping: a stationary point
            report.converged = report.diagnostic.is_none() || cost == 0.0;
            break;
        }
        if report.converged || cost == 0.0 {
            report.converged = true;
            break;
        }
    }
    report.final_cost = cost;
    (cur, report)
}

/// Outcome of a map-level adjustment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MapBaReport {
    pub lm: LmReport,
    pub free_cameras: usize,
    pub fixed_cameras: usize,
    pub points: usize,
    pub removed_observations: usize,
    pub removed_points: usize,
}

/// Builds a problem over `points` and every keyframe observing them, runs
/// LM, writes the result back and drops observations beyond `outlier_px`.
fn adjust_map(map: &mut SlamMap, points: &BTreeSet<PointId>, modes: &BTreeMap<KeyframeId, CameraMode>, k: &CameraIntrinsics, cfg: &BaConfig, max_iters: usize) -> MapBaReport {
    let mut problem = BaProblem::new(*k);
    problem.literal_distortion = cfg.literal_distortion;
    let mut cam_index: BTreeMap<KeyframeId, usize> = BTreeMap::new();
    let mut kf_ids = Vec::new();
    let point_ids: Vec<PointId> = points.iter().copied().filter(|p| map.points.contains_key(p)).collect();
    for (i, pid) in point_ids.iter().enumerate() {
        let mp = &map.points[pid];
        problem.points.push(mp.position);
        for (kf, px) in &mp.observations {
            let cam = *cam_index.entry(*kf).or_insert_with(|| {
                kf_ids.push(*kf);
                problem.cameras.push(BaCamera {
                    pose: map.keyframes[*kf].pose,
                    mode: modes.get(kf).copied().unwrap_or(CameraMode::Fixed),
                });
                problem.cameras.len() - 1
            });
            problem.observations.push(Observation { camera: cam, point: i, pixel: *px });
        }
    }
    let opts = LmOptions {
        max_iters,
        huber_delta: cfg.huber_px,
        ..LmOptions::default()
    };
    let (solved, lm) = lm_minimize(&problem, &opts);
    for (cam, kf) in solved.cameras.iter().zip(&kf_ids) {
        map.keyframes[*kf].pose = cam.pose;
    }
    for (x, pid) in solved.points.iter().zip(&point_ids) {
        map.points.get_mut(pid).expect("point exists").position = *x;
    }
    let outliers = solved.outlier_observations(cfg.outlier_px);
    for &o in &outliers {
        let obs = &solved.observations[o];
        map.remove_observation(kf_ids[obs.camera], point_ids[obs.point]);
    }
    let weak: Vec<PointId> = point_ids
        .iter()
        .copied()
        .filter(|p| map.points.get(p).is_some_and(|mp| mp.observations.len() < 2))
        .collect();
    for p in &weak {
        map.remove_point(*p);
    }
    let free = solved.cameras.iter().filter(|c| c.mode != CameraMode::Fixed).count();
    MapBaReport {
        lm,
        free_cameras: free,
        fixed_cameras: solved.cameras.len() - free,
        points: point_ids.len(),
        removed_observations: outliers.len(),
        removed_points: weak.len(),
    }
}

/// Adjusts `kf` and its covisible keyframes together with every point they
/// observe. The oldest keyframe of the set and all outside observers stay
/// fixed. Without outside observers the second-oldest keyframe is held on
/// its current distance to the oldest so the scale cannot drift.
pub fn local_ba(map: &mut SlamMap, kf: KeyframeId, k: &CameraIntrinsics, cfg: &BaConfig) -> Option<MapBaReport> {
    let mut local: BTreeSet<KeyframeId> = map.covisible(kf).into_iter().collect();
    local.insert(kf);
    let points: BTreeSet<PointId> = local.iter().flat_map(|j| map.keyframes[*j].observations.keys().copied()).collect();
    let outside = points
        .iter()
        .filter_map(|p| map.points.get(p))
        .any(|mp| mp.observations.keys().any(|j| !local.contains(j)));
    let mut modes: BTreeMap<KeyframeId, CameraMode> = local.iter().map(|j| (*j, CameraMode::Free)).collect();
    let order: Vec<KeyframeId> = local.iter().copied().collect();
    if order.len() == 1 {
        if !outside {
            return None;
        }
    } else {
        modes.insert(order[0], CameraMode::Fixed);
        if !outside {
            let anchor = map.keyframes[order[0]].pose.center;
            let radius = (map.keyframes[order[1]].pose.center - anchor).norm();
            modes.insert(order[1], CameraMode::CenterOnSphere { anchor, radius });
        }
    }
    Some(adjust_map(map, &points, &modes, k, cfg, cfg.max_iters_local))
}

/// Adjusts every keyframe and point. The first keyframe is fixed and the
/// second keeps its distance to it.
pub fn global_ba(map: &mut SlamMap, k: &CameraIntrinsics, cfg: &BaConfig) -> Option<MapBaReport> {
    if map.keyframes.len() < 2 {
        return None;
    }
    let mut modes: BTreeMap<KeyframeId, CameraMode> = (0..map.keyframes.len()).map(|j| (j, CameraMode::Free)).collect();
    modes.insert(0, CameraMode::Fixed);
    let anchor = map.keyframes[0].pose.center;
    let radius = (map.keyframes[1].pose.center - anchor).norm();
    if radius > 0.0 {
        modes.insert(1, CameraMode::CenterOnSphere { anchor, radius });
    }
    let points: BTreeSet<PointId> = map.points.keys().copied().collect();
    let report = adjust_map(map, &points, &modes, k, cfg, cfg.max_iters_global);
    map.update_covisibility();
    Some(report)
}

fn params_norm(p: &BaProblem) -> f64 {
    let c: f64 = p.cameras.iter().map(|c| c.pose.center.norm_squared()).sum();
    let q: f64 = p.points.iter().map(|x| x.norm_squared()).sum();
    (c + q).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics(r: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, r).unwrap()
    }

    /// Cameras on an arc looking at the origin, points in a cube.
    pub(crate) fn synthetic(rng: &mut ChaCha8Rng, ncam: usize, npts: usize, r: f64) -> BaProblem {
        let mut p = BaProblem::new(intrinsics(r));
        for j in 0..ncam {
            let a = -0.4 + 0.8 * j as f64 / ncam.max(2) as f64 + rng.random_range(-0.02..0.02);
            let center = Vec3::new(6.0 * a.sin(), rng.random_range(-0.3..0.3), -6.0 * a.cos());
            let z = unit(-center);
            let x = unit(Vec3::y().cross(&z));
            let y = z.cross(&x);
            let rot = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
            p.cameras.push(BaCamera {
                pose: Pose::new(rot, center),
                mode: CameraMode::Free,
            });
        }
        for _ in 0..npts {
            p.points.push(Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)));
        }
        for i in 0..npts {
            for j in 0..ncam {
                if let Some(px) = project(&p.cameras[j].pose, &p.points[i], &p.intrinsics) {
                    p.observations.push(Observation { camera: j, point: i, pixel: px });
                }
            }
        }
        p.cameras[0].mode = CameraMode::Fixed;
        p
    }

    #[test]
    fn projection_examples() {
        let k = intrinsics(0.0);
        assert_eq!(project(&Pose::identity(), &Vec3::new(0.0, 0.0, 1.0), &k), Some(Vec2::new(320.0, 240.0)));
        assert_eq!(project(&Pose::identity(), &Vec3::new(1.0, 0.0, 2.0), &k), Some(Vec2::new(570.0, 240.0)));
        // |u| = 0.5 -> factor 1 + 0.1 * 0.25
        let k = intrinsics(0.1);
        let px = project(&Pose::identity(), &Vec3::new(0.5, 0.0, 1.0), &k).unwrap();
        assert!((px.x - (320.0 + 500.0 * 0.5 * 1.025)).abs() < 1e-12);
        assert!(project(&Pose::identity(), &Vec3::new(0.0, 0.0, -1.0), &k).is_none());
    }

    #[test]
    fn literal_and_standard_forms_agree_without_distortion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = synthetic(&mut rng, 3, 20, 0.0);
        for o in &mut p.observations {
            o.pixel += Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let a = p.residuals();
        p.literal_distortion = true;
        assert_eq!(a, p.residuals());
    }

    #[test]
    fn noise_free_residual_is_zero_and_empty_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = synthetic(&mut rng, 4, 30, 0.05);
        assert!(p.residuals().norm() < 1e-10);
        let empty = BaProblem::new(intrinsics(0.0));
        assert_eq!(empty.residuals().len(), 0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in [0.0, 0.08] {
            for literal in [false, true] {
                let mut p = synthetic(&mut rng, 4, 15, r);
                p.literal_distortion = literal;
                p.cameras[2].mode = CameraMode::CenterOnSphere {
                    anchor: p.cameras[0].pose.center,
                    radius: (p.cameras[2].pose.center - p.cameras[0].pose.center).norm(),
                };
                let ja = p.dense_jacobian();
                let n = p.parameter_count();
                let h = 1e-6;
                let scale = ja.amax();
                for k in 0..n {
                    let mut d = DVector::zeros(n);
                    d[k] = h;
                    let rp = p.apply_step(&d).residuals();
                    d[k] = -h;
                    let rm = p.apply_step(&d).residuals();
                    let col = (rp - rm) / (2.0 * h);
                    for row in 0..col.len() {
                        let (a, b) = (ja[(row, k)], col[row]);
                        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3 * scale);
                        assert!(rel < 1e-5, "entry ({row},{k}): {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn schur_equals_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = synthetic(&mut rng, 5, 40, 0.0);
        p.cameras[1].mode = CameraMode::CenterOnSphere {
            anchor: p.cameras[0].pose.center,
            radius: 1.0 + (p.cameras[1].pose.center - p.cameras[0].pose.center).norm(),
        };
        for x in &mut p.points {
            *x += Vec3::new(rng.random_range(-0.05..0.05), 0.0, rng.random_range(-0.05..0.05));
        }
        let ne = p.normal_equations(2.0);
        for lambda in [0.0, 1e-3, 1.0] {
            let a = ne.solve_schur(lambda).unwrap();
            let b = ne.solve_dense(lambda).unwrap();
            assert!((a - b).amax() < 1e-8);
        }
    }

    #[test]
    fn perturbed_point_restored() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = synthetic(&mut rng, 5, 60, 0.0);
        let mut p = truth.clone();
        for c in &mut p.cameras {
            c.mode = CameraMode::Fixed;
        }
        p.points[7] += Vec3::new(0.1, 0.0, 0.0);
        let (out, rep) = lm_minimize(&p, &LmOptions::default());
        assert!((out.points[7] - truth.points[7]).norm() < 1e-6);
        assert!(rep.final_cost <= rep.initial_cost);
    }

    #[test]
    fn optimum_is_stable_and_fixed_cameras_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = synthetic(&mut rng, 4, 40, 0.0);
        let (out, rep) = lm_minimize(&p, &LmOptions::default());
        assert!(rep.iterations <= 1);
        assert!((rep.final_cost - rep.initial_cost).abs() < 1e-12);
        assert_eq!(out.cameras[0], p.cameras[0]);
    }

    #[test]
    fn noisy_problem_rms_below_threshold() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = synthetic(&mut rng, 10, 500, 0.0);
        let noise = Normal::new(0.0, 0.5).unwrap();
        for o in &mut p.observations {
            o.pixel += Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
        }
        p.cameras[1].mode = CameraMode::CenterOnSphere {
            anchor: p.cameras[0].pose.center,
            radius: (p.cameras[1].pose.center - p.cameras[0].pose.center).norm(),
        };
        for c in p.cameras.iter_mut().skip(2) {
            c.pose.center += Vec3::new(0.02, -0.01, 0.03);
        }
        let (out, rep) = lm_minimize(&p, &LmOptions { huber_delta: 2.0, ..Default::default() });
        assert!(rep.accepted_costs.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.rms() < 0.7, "rms {}", out.rms());
        match out.cameras[1].mode {
            CameraMode::CenterOnSphere { anchor, radius } => {
                assert!(((out.cameras[1].pose.center - anchor).norm() - radius).abs() < 1e-9)
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn outliers_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = synthetic(&mut rng, 3, 10, 0.0);
        p.observations[4].pixel.x += 20.0;
        assert_eq!(p.outlier_observations(6.0), vec![4]);
    }
}
