//! Keyframe state machine: keyframe selection, quality-validated two-view
//! initialization, incremental tracking and mapping, track-loss recovery.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::{Rotation3, UnitQuaternion};
use serde::Serialize;

use crate::ba::{self, lm_minimize, BaCamera, BaProblem, CameraMode, LmOptions, Observation};
use crate::config::{Config, InitConfig, KeyframeConfig};
use crate::dataset::{CameraIntrinsics, TrajectoryRecord};
use crate::edges::EdgeChain;
use crate::error::{Error, Result};
use crate::flow::TrackId;
use crate::frontend::{FrameObservation, Frontend, KeyframeView};
use crate::geometry::{five_point_ransac, pnp_resection, rotation_angle, triangulate, EssentialParams, PnpParams, Pose};
use crate::loop_closure::{detect_loop, merge_loop, moment_signature, validate_loop, QuadrantDescriptor};
pub use crate::map::{Keyframe, KeyframeId, MapPoint, PointId, SlamMap};
use crate::{Mat3, Vec2, Vec3};

/// Measurements of the current frame against the last keyframe.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameState {
    /// Rotation between the current frame and the last keyframe, degrees.
    pub rotation_deg: f64,
    /// Tracks shared with the last keyframe.
    pub correspondences: usize,
    /// Shared tracks attached to a map point.
    pub correspondences_3d2d: usize,
    pub mean_displacement_px: f64,
    pub width: usize,
    pub elapsed_s: f64,
    pub initialized: bool,
}

/// Running mean of the per-frame correspondence count.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrackStats {
    pub frames: usize,
    pub mean_correspondences: f64,
}

impl TrackStats {
    pub fn push(&mut self, n: usize) {
        self.frames += 1;
        self.mean_correspondences += (n as f64 - self.mean_correspondences) / self.frames as f64;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyframeDecision {
    None,
    PreviousFrame,
    CurrentFrame,
}

/// First matching criterion wins: rotation, correspondence drop, 3D-2D
/// shortage (previous frame), then displacement and elapsed time (current frame).
pub fn select_keyframe(state: &FrameState, stats: &TrackStats, cfg: &KeyframeConfig) -> KeyframeDecision {
    if state.rotation_deg > cfg.rot_deg {
        return KeyframeDecision::PreviousFrame;
    }
    if stats.frames > 0 && (state.correspondences as f64) < cfg.track_frac * stats.mean_correspondences {
        return KeyframeDecision::PreviousFrame;
    }
    if state.initialized && state.correspondences_3d2d < cfg.min_3d2d {
        return KeyframeDecision::PreviousFrame;
    }
    if state.mean_displacement_px > cfg.disp_frac * state.width as f64 {
        return KeyframeDecision::CurrentFrame;
    }
    if state.elapsed_s >= cfg.interval_s {
        return KeyframeDecision::CurrentFrame;
    }
    KeyframeDecision::None
}

/// A straight piece of an edge chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment2d {
    pub start: Vec2,
    pub end: Vec2,
    pub points: usize,
}

fn line_distance(a: &Vec2, b: &Vec2, p: &Vec2) -> f64 {
    let d = b - a;
    let n = d.norm();
    if n == 0.0 {
        return (p - a).norm();
    }
    (d.x * (p.y - a.y) - d.y * (p.x - a.x)).abs() / n
}

/// Greedy split of a chain into segments whose points all stay within
/// `max_dev` of the line through the segment endpoints. Segments share
/// their break points; only those with at least `min_len` points are kept.
pub fn straight_segments(chain: &EdgeChain, max_dev: f64, min_len: usize) -> Vec<Segment2d> {
    let pts: Vec<Vec2> = chain.points.iter().map(|&(x, y)| Vec2::new(x as f64, y as f64)).collect();
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < pts.len() {
        let mut end = start + 1;
        while end + 1 < pts.len() {
            let cand = end + 1;
            if (start + 1..cand).all(|i| line_distance(&pts[start], &pts[cand], &pts[i]) <= max_dev) {
                end = cand;
            } else {
                break;
            }
        }
        let n = end - start + 1;
        if n >= min_len {
            out.push(Segment2d {
                start: pts[start],
                end: pts[end],
                points: n,
            });
        }
        start = end;
    }
    out
}

/// A tracked pixel and its reconstructed point, if any.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackedPoint {
    pub pixel: Vec2,
    pub point: Option<Vec3>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct QualityReport {
    pub segments_2d: usize,
    pub segments_matched: usize,
    pub ratio: f64,
}

impl QualityReport {
    pub fn accepted(&self, cfg: &InitConfig) -> bool {
        self.ratio >= cfg.quality_ratio && self.segments_matched >= cfg.quality_count
    }
}

/// Tracked points within this distance of a segment belong to it, pixels.
const SEGMENT_ASSOCIATION_PX: f64 = 1.5;
/// Segments with fewer tracked points carry no structure to check.
const MIN_SEGMENT_TRACKS: usize = 3;

/// RMS distance to the best-fit line and the line (centroid, direction).
fn fit_line_3d(points: &[Vec3]) -> (f64, Vec3, Vec3) {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let (imax, _) = eig.eigenvalues.argmax();
    let dir = eig.eigenvectors.column(imax).into_owned();
    let rms = (points.iter().map(|p| (p - c).cross(&dir).norm_squared()).sum::<f64>() / n).sqrt();
    (rms, c, dir)
}

/// Counts 2D segments whose tracked points reconstruct to an ordered,
/// collinear 3D set.
pub fn quality_factor(segments: &[Segment2d], tracked: &[TrackedPoint], median_depth: f64, cfg: &InitConfig) -> QualityReport {
    let mut report = QualityReport::default();
    for seg in segments {
        let dir = seg.end - seg.start;
        let len = dir.norm();
        if len == 0.0 {
            continue;
        }
        let unit = dir / len;
        let mut members: Vec<(f64, Option<Vec3>)> = tracked
            .iter()
            .filter_map(|tp| {
                let t = (tp.pixel - seg.start).dot(&unit);
                let inside = t >= -SEGMENT_ASSOCIATION_PX && t <= len + SEGMENT_ASSOCIATION_PX;
                (inside && line_distance(&seg.start, &seg.end, &tp.pixel) <= SEGMENT_ASSOCIATION_PX).then_some((t, tp.point))
            })
            .collect();
        if members.len() < MIN_SEGMENT_TRACKS {
            continue;
        }
        report.segments_2d += 1;
        members.sort_by(|a, b| a.0.total_cmp(&b.0));
        let with_3d: Vec<Vec3> = members.iter().filter_map(|m| m.1).collect();
        if (with_3d.len() as f64) < cfg.coverage * members.len() as f64 || with_3d.len() < 2 {
            continue;
        }
        let (rms, c, d) = fit_line_3d(&with_3d);
        if rms > cfg.collinear_frac * median_depth {
            continue;
        }
        let s: Vec<f64> = with_3d.iter().map(|p| (p - c).dot(&d)).collect();
        let increasing = s.windows(2).all(|w| w[1] > w[0]);
        let decreasing = s.windows(2).all(|w| w[1] < w[0]);
        if increasing || decreasing {
            report.segments_matched += 1;
        }
    }
    report.ratio = if report.segments_2d == 0 {
        0.0
    } else {
        report.segments_matched as f64 / report.segments_2d as f64
    };
    report
}

/// Segments of every chain of a keyframe.
pub fn keyframe_segments(kf: &Keyframe, cfg: &InitConfig) -> Vec<Segment2d> {
    kf.chains
        .iter()
        .flat_map(|c| straight_segments(c, cfg.segment_max_dev, cfg.segment_min_len))
        .collect()
}

fn normalized(k: &CameraIntrinsics, px: &Vec2) -> Vec2 {
    k.undistort(px)
}

fn essential_params(cfg: &Config, k: &CameraIntrinsics, seed: u64) -> EssentialParams {
    EssentialParams {
        max_iters: cfg.ransac.max_iters,
        confidence: cfg.ransac.confidence,
        tol: cfg.ransac.essential_tol_px / k.focal(),
        seed,
        min_inliers: cfg.ransac.min_essential_inliers,
    }
}

fn pnp_params(cfg: &Config, k: &CameraIntrinsics, seed: u64) -> PnpParams {
    PnpParams {
        max_iters: cfg.ransac.max_iters,
        confidence: cfg.ransac.confidence,
        tol: cfg.ransac.pnp_tol_px / k.focal(),
        seed,
        min_inliers: cfg.ransac.min_pnp_inliers,
    }
}

/// Triangulates a track over keyframe views and checks every reprojection.
fn triangulate_views(views: &[(Pose, Vec2)], k: &CameraIntrinsics, cfg: &Config) -> Option<Vec3> {
    let normalized_views: Vec<(Pose, Vec2)> = views.iter().map(|(p, px)| (*p, normalized(k, px))).collect();
    let tri = triangulate(&normalized_views, cfg.ransac.min_parallax_deg).ok()?;
    views
        .iter()
        .all(|(pose, px)| ba::project(pose, &tri.point, k).is_some_and(|q| (q - px).norm() <= cfg.ba.outlier_px))
        .then_some(tri.point)
}

/// Outcome of one initialization attempt. `map` is set only when accepted.
#[derive(Clone, Debug)]
pub struct InitAttempt {
    pub correspondences: usize,
    pub inliers: usize,
    pub triangulated: usize,
    pub quality: QualityReport,
    pub map: Option<SlamMap>,
}

/// Two-view initialization: five-point pose with unit baseline,
/// triangulation, bundle adjustment, and the quality-factor gate.
pub fn two_view_init(first: &Keyframe, second: &Keyframe, k: &CameraIntrinsics, cfg: &Config, seed: u64) -> Result<InitAttempt> {
    let common: Vec<(TrackId, Vec2, Vec2)> = first
        .tracks
        .iter()
        .filter_map(|(t, a)| second.tracks.get(t).map(|b| (*t, *a, *b)))
        .collect();
    if common.len() < cfg.init.min_correspondences {
        return Err(Error::NotEnoughData {
            needed: cfg.init.min_correspondences,
            got: common.len(),
        });
    }
    let a: Vec<Vec2> = common.iter().map(|c| normalized(k, &c.1)).collect();
    let b: Vec<Vec2> = common.iter().map(|c| normalized(k, &c.2)).collect();
    let est = five_point_ransac(&a, &b, &essential_params(cfg, k, seed))?;
    let (pa, pb) = est.pose.to_poses();

    let mut map = SlamMap::new();
    let mut kf_a = first.clone();
    kf_a.pose = pa;
    kf_a.observations.clear();
    let mut kf_b = second.clone();
    kf_b.pose = pb;
    kf_b.observations.clear();
    let ia = map.add_keyframe(kf_a);
    let ib = map.add_keyframe(kf_b);
    for &i in &est.inliers {
        let (t, xa, xb) = common[i];
        if let Some(x) = triangulate_views(&[(pa, xa), (pb, xb)], k, cfg) {
            let p = map.add_point(x);
            map.add_observation(ia, p, xa);
            map.add_observation(ib, p, xb);
            map.track_points.insert(t, p);
        }
    }
    let triangulated = map.points.len();
    ba::global_ba(&mut map, k, &cfg.ba);

    let tracked: Vec<TrackedPoint> = second
        .tracks
        .iter()
        .filter(|(t, _)| first.tracks.contains_key(t))
        .map(|(t, px)| TrackedPoint {
            pixel: *px,
            point: map.track_points.get(t).and_then(|p| map.points.get(p)).map(|p| p.position),
        })
        .collect();
    let depth = map.median_depth(ib).unwrap_or(0.0);
    let quality = quality_factor(&keyframe_segments(second, &cfg.init), &tracked, depth, &cfg.init);
    log::info!(
        "init frames {}-{}: {} correspondences, {} inliers, {} points, quality {}/{} ({:.2})",
        first.frame_index,
        second.frame_index,
        common.len(),
        est.inliers.len(),
        triangulated,
        quality.segments_matched,
        quality.segments_2d,
        quality.ratio
    );
    let accepted = quality.accepted(&cfg.init);
    Ok(InitAttempt {
        correspondences: common.len(),
        inliers: est.inliers.len(),
        triangulated,
        quality,
        map: accepted.then_some(map),
    })
}

/// Scale between SLAM coordinates and the local recovery frame:
/// `|C_S(t-1) - C_S(t-2)| / |C_L(t-1) - C_L(t-2)|`.
pub fn scale_from_centers(cs_prev: &Vec3, cs_prev2: &Vec3, cl_prev: &Vec3, cl_prev2: &Vec3) -> Result<f64> {
    let ds = (cs_prev - cs_prev2).norm();
    let dl = (cl_prev - cl_prev2).norm();
    if dl < 1e-9 || ds < 1e-9 {
        return Err(Error::Degenerate("keyframe centres coincide".into()));
    }
    Ok(ds / dl)
}

/// Composition of a pose recovered in the local frame into SLAM coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComposedPose {
    pub c_scaled: Vec3,
    pub c_rot: Vec3,
    pub center: Vec3,
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// `prev` is K_{t-1} in SLAM coordinates, `local` is K_t in the frame of
/// K_{t-1}, scaled by `lambda` into SLAM units.
pub fn compose_recovered_pose(prev: &Pose, lambda: f64, local: &Pose) -> ComposedPose {
    let c_scaled = lambda * local.center;
    let c_rot = prev.rotation * prev.center + c_scaled;
    let center = prev.rotation.transpose() * c_rot;
    let rotation = local.rotation * prev.rotation;
    let translation = -rotation * center;
    ComposedPose {
        c_scaled,
        c_rot,
        center,
        rotation,
        translation,
    }
}

/// State of a track-loss recovery for the keyframe triple (t-2, t-1, t).
#[derive(Clone, Debug, PartialEq)]
pub struct TrackLossContext {
    pub keyframes: (KeyframeId, KeyframeId),
    /// K_{t-2}, K_{t-1}, K_t in the local frame (K_{t-1} at the origin, unit baseline to K_t).
    pub local_poses: [Pose; 3],
    pub local_points: BTreeMap<TrackId, Vec3>,
    pub lambda: f64,
    pub composed: ComposedPose,
    /// Local inlier tracks without a SLAM map point yet.
    pub omega_tracks: Vec<TrackId>,
    pub inliers: usize,
}

impl TrackLossContext {
    pub fn pose(&self) -> Pose {
        Pose::new(self.composed.rotation, self.composed.center)
    }
}

/// Estimates K_t from K_{t-2} and K_{t-1} alone: five-point in the frame of
/// K_{t-1}, triangulation, resection of K_{t-2}, bundle adjustment with
/// K_{t-1} fixed and K_t on the unit sphere, then scale and composition.
pub fn recover_pose(map: &SlamMap, prev2: KeyframeId, prev: KeyframeId, tracks: &BTreeMap<TrackId, Vec2>, k: &CameraIntrinsics, cfg: &Config, seed: u64) -> Result<TrackLossContext> {
    let kf1 = &map.keyframes[prev];
    let kf2 = &map.keyframes[prev2];
    let common: Vec<(TrackId, Vec2, Vec2)> = kf1.tracks.iter().filter_map(|(t, a)| tracks.get(t).map(|b| (*t, *a, *b))).collect();
    let a: Vec<Vec2> = common.iter().map(|c| normalized(k, &c.1)).collect();
    let b: Vec<Vec2> = common.iter().map(|c| normalized(k, &c.2)).collect();
    let est = five_point_ransac(&a, &b, &essential_params(cfg, k, seed))?;
    let (l1, lt) = est.pose.to_poses();

    let mut local: BTreeMap<TrackId, Vec3> = BTreeMap::new();
    for &i in &est.inliers {
        let (t, x1, xt) = common[i];
        if let Some(x) = triangulate_views(&[(l1, x1), (lt, xt)], k, cfg) {
            local.insert(t, x);
        }
    }
    let resect: Vec<(TrackId, Vec3, Vec2)> = kf2.tracks.iter().filter_map(|(t, px)| local.get(t).map(|x| (*t, *x, *px))).collect();
    let world: Vec<Vec3> = resect.iter().map(|r| r.1).collect();
    let image: Vec<Vec2> = resect.iter().map(|r| normalized(k, &r.2)).collect();
    let l2 = pnp_resection(&world, &image, &pnp_params(cfg, k, seed ^ 0x5bd1_e995))?.pose;

    let mut problem = BaProblem::new(*k);
    problem.literal_distortion = cfg.ba.literal_distortion;
    problem.cameras = vec![
        BaCamera { pose: l2, mode: CameraMode::Free },
        BaCamera { pose: l1, mode: CameraMode::Fixed },
        BaCamera {
            pose: lt,
            mode: CameraMode::CenterOnSphere { anchor: Vec3::zeros(), radius: 1.0 },
        },
    ];
    let ids: Vec<TrackId> = local.keys().copied().collect();
    for (i, t) in ids.iter().enumerate() {
        problem.points.push(local[t]);
        for (cam, px) in [(0, kf2.tracks.get(t)), (1, kf1.tracks.get(t)), (2, tracks.get(t))] {
            if let Some(px) = px {
                problem.observations.push(Observation { camera: cam, point: i, pixel: *px });
            }
        }
    }
    let opts = LmOptions {
        max_iters: cfg.ba.max_iters_local,
        huber_delta: cfg.ba.huber_px,
        ..LmOptions::default()
    };
    let (solved, _) = lm_minimize(&problem, &opts);
    let bad: BTreeSet<usize> = solved.outlier_observations(cfg.ba.outlier_px).iter().map(|&o| solved.observations[o].point).collect();
    let inliers = ids.len() - bad.len();
    if inliers <= cfg.recovery_min_inliers {
        return Err(Error::EstimationFailed(format!("recovery: {inliers} inlier points")));
    }
    let local_points: BTreeMap<TrackId, Vec3> = ids
        .iter()
        .enumerate()
        .filter(|(i, _)| !bad.contains(i))
        .map(|(i, t)| (*t, solved.points[i]))
        .collect();
    let [p2, p1, pt] = [solved.cameras[0].pose, solved.cameras[1].pose, solved.cameras[2].pose];
    let lambda = scale_from_centers(&kf1.pose.center, &kf2.pose.center, &p1.center, &p2.center)?;
    let composed = compose_recovered_pose(&kf1.pose, lambda, &pt);
    let omega_tracks = local_points
        .keys()
        .filter(|t| !map.track_points.get(t).is_some_and(|p| map.points.contains_key(p)))
        .copied()
        .collect();
    Ok(TrackLossContext {
        keyframes: (prev2, prev),
        local_poses: [p2, p1, pt],
        local_points,
        lambda,
        composed,
        omega_tracks,
        inliers,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PipelineTimings {
    pub edge: f64,
    pub flow: f64,
    pub keyframe: f64,
    pub pose: f64,
    pub map: f64,
    pub local_ba: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineStatus {
    Initializing,
    Tracking,
    Lost { frame_index: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub frames: usize,
    pub skipped_frames: usize,
    pub keyframes: usize,
    pub recoveries: usize,
    pub loops_closed: usize,
    pub last_frame: Option<usize>,
    pub initialized: bool,
    /// Frame indices of the accepted initialization pair.
    pub init_frames: Option<(usize, usize)>,
    /// Quality of the accepted initialization, or of the last rejected attempt.
    pub init_quality: Option<QualityReport>,
    pub lost_at: Option<usize>,
    /// Milliseconds per stage.
    pub timings: PipelineTimings,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Drives a [`Frontend`] through initialization and keyframe tracking.
pub struct Pipeline<F: Frontend> {
    frontend: F,
    config: Config,
    seed: u64,
    map: SlamMap,
    status: PipelineStatus,
    /// Initialization reference keyframe (before the map exists).
    reference: Option<Keyframe>,
    last_keyframe: Option<Keyframe>,
    previous: Option<FrameObservation>,
    stats: TrackStats,
    /// Keyframe observations of every track.
    track_views: BTreeMap<TrackId, Vec<(KeyframeId, Vec2)>>,
    summary: RunSummary,
    attempts: u64,
}

impl<F: Frontend> Pipeline<F> {
    pub fn new(frontend: F, config: Config) -> Result<Self> {
        config.validate()?;
        let seed = config.ransac.seed;
        Ok(Self {
            frontend,
            config,
            seed,
            map: SlamMap::new(),
            status: PipelineStatus::Initializing,
            reference: None,
            last_keyframe: None,
            previous: None,
            stats: TrackStats::default(),
            track_views: BTreeMap::new(),
            summary: RunSummary::default(),
            attempts: 0,
        })
    }

    pub fn map(&self) -> &SlamMap {
        &self.map
    }

    pub fn status(&self) -> PipelineStatus {
        self.status
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn summary(&self) -> RunSummary {
        let mut s = self.summary.clone();
        let t = self.frontend.timings();
        s.timings.edge = t.edge_ms;
        s.timings.flow = t.flow_ms;
        s.skipped_frames = self.frontend.skipped_frames();
        s.keyframes = self.map.keyframes.len();
        s.initialized = self.status != PipelineStatus::Initializing;
        s
    }

    /// Keyframe poses as TUM records (camera position and orientation in the world).
    pub fn trajectory(&self) -> Vec<TrajectoryRecord> {
        self.map
            .keyframes
            .iter()
            .map(|kf| TrajectoryRecord {
                timestamp: kf.timestamp,
                position: kf.pose.center,
                orientation: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(kf.pose.rotation.transpose())),
            })
            .collect()
    }

    fn next_seed(&mut self) -> u64 {
        self.attempts += 1;
        self.seed.wrapping_add(self.attempts.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    /// Processes one frame. `None` at the end of the sequence or once tracking is lost.
    pub fn step(&mut self) -> Option<Result<()>> {
        if matches!(self.status, PipelineStatus::Lost { .. }) {
            return None;
        }
        let obs = match self.frontend.next_frame()? {
            Ok(o) => o,
            Err(e) => return Some(Err(e)),
        };
        Some(self.handle_frame(obs))
    }

    /// Runs to the end of the sequence or until tracking is lost.
    pub fn run(&mut self) -> Result<RunSummary> {
        while let Some(r) = self.step() {
            r?;
        }
        if self.status == PipelineStatus::Tracking && self.map.keyframes.len() >= 2 {
            let t = Instant::now();
            ba::global_ba(&mut self.map, &self.frontend.intrinsics().clone(), &self.config.ba);
            self.summary.timings.local_ba += ms(t);
        }
        Ok(self.summary())
    }

    /// Runs until the two-view initialization is accepted or the sequence ends.
    pub fn run_init_only(&mut self) -> Result<RunSummary> {
        while self.status == PipelineStatus::Initializing {
            match self.step() {
                Some(r) => r?,
                None => break,
            }
        }
        Ok(self.summary())
    }

    fn frame_state(&mut self, last: &Keyframe, obs: &FrameObservation) -> FrameState {
        let k = *self.frontend.intrinsics();
        let common: Vec<(TrackId, Vec2, Vec2)> = obs.points.iter().filter_map(|(t, p)| last.tracks.get(t).map(|q| (*t, *q, *p))).collect();
        let mapped: Vec<(Vec3, Vec2)> = common
            .iter()
            .filter_map(|(t, _, p)| self.map.track_points.get(t).and_then(|id| self.map.points.get(id)).map(|mp| (mp.position, *p)))
            .collect();
        let mean_displacement_px = if common.is_empty() {
            0.0
        } else {
            common.iter().map(|(_, a, b)| (b - a).norm()).sum::<f64>() / common.len() as f64
        };
        let initialized = self.status == PipelineStatus::Tracking;
        let seed = self.next_seed();
        let rotation_deg = if initialized {
            let world: Vec<Vec3> = mapped.iter().map(|m| m.0).collect();
            let image: Vec<Vec2> = mapped.iter().map(|m| normalized(&k, &m.1)).collect();
            if world.len() >= self.config.ransac.min_pnp_inliers {
                pnp_resection(&world, &image, &pnp_params(&self.config, &k, seed))
                    .map(|e| rotation_angle(&(e.pose.rotation * last.pose.rotation.transpose())))
                    .unwrap_or(0.0)
            } else {
                0.0
            }
        } else if common.len() >= self.config.ransac.min_essential_inliers {
            let a: Vec<Vec2> = common.iter().map(|c| normalized(&k, &c.1)).collect();
            let b: Vec<Vec2> = common.iter().map(|c| normalized(&k, &c.2)).collect();
            five_point_ransac(&a, &b, &essential_params(&self.config, &k, seed))
                .map(|e| rotation_angle(&e.pose.rotation))
                .unwrap_or(0.0)
        } else {
            0.0
        };
        FrameState {
            rotation_deg,
            correspondences: common.len(),
            correspondences_3d2d: mapped.len(),
            mean_displacement_px,
            width: obs.width,
            elapsed_s: obs.timestamp - last.timestamp,
            initialized,
        }
    }

    fn handle_frame(&mut self, obs: FrameObservation) -> Result<()> {
        self.summary.frames += 1;
        self.summary.last_frame = Some(obs.frame_index);
        let Some(last) = self.last_keyframe.take() else {
            return self.make_keyframe(obs, true);
        };
        let t = Instant::now();
        let state = self.frame_state(&last, &obs);
        let decision = select_keyframe(&state, &self.stats, &self.config.keyframe);
        self.stats.push(state.correspondences);
        self.summary.timings.keyframe += ms(t);
        let last_frame = last.frame_index;
        self.last_keyframe = Some(last);
        match decision {
            KeyframeDecision::None => {}
            KeyframeDecision::CurrentFrame => self.make_keyframe(obs.clone(), true)?,
            KeyframeDecision::PreviousFrame => match self.previous.take() {
                Some(prev) if prev.frame_index != last_frame => {
                    log::debug!("frame {} promoted to keyframe", prev.frame_index);
                    self.make_keyframe(prev, false)?
                }
                _ => self.make_keyframe(obs.clone(), true)?,
            },
        }
        self.previous = Some(obs);
        Ok(())
    }

    fn make_keyframe(&mut self, obs: FrameObservation, with_spawned: bool) -> Result<()> {
        let update = self.frontend.on_keyframe();
        let mut tracks: BTreeMap<TrackId, Vec2> = obs.points.iter().copied().collect();
        for r in &update.rejected {
            tracks.remove(r);
        }
        if with_spawned {
            tracks.extend(update.spawned.iter().copied());
        }
        let kf = Keyframe {
            id: 0,
            frame_index: obs.frame_index,
            timestamp: obs.timestamp,
            pose: Pose::identity(),
            signature: moment_signature(&obs.mask).ok(),
            quadrants: Some(QuadrantDescriptor::compute(&obs.mask, &obs.image)),
            chains: obs.chains,
            mask: obs.mask,
            image: obs.image,
            tracks,
            observations: BTreeMap::new(),
        };
        match self.status {
            PipelineStatus::Initializing => self.try_initialize(kf),
            PipelineStatus::Tracking => self.track_new_keyframe(kf),
            PipelineStatus::Lost { .. } => Ok(()),
        }
    }

    fn try_initialize(&mut self, kf: Keyframe) -> Result<()> {
        let Some(reference) = self.reference.take() else {
            self.last_keyframe = Some(kf.clone());
            self.reference = Some(kf);
            return Ok(());
        };
        let k = *self.frontend.intrinsics();
        let shared = reference.tracks.keys().filter(|t| kf.tracks.contains_key(t)).count();
        if shared < self.config.init.min_correspondences {
            log::debug!("init reference moved to frame {} ({} shared tracks)", kf.frame_index, shared);
            self.last_keyframe = Some(kf.clone());
            self.reference = Some(kf);
            return Ok(());
        }
        let t = Instant::now();
        let seed = self.next_seed();
        let attempt = two_view_init(&reference, &kf, &k, &self.config, seed);
        self.summary.timings.pose += ms(t);
        self.last_keyframe = Some(kf.clone());
        match attempt {
            Ok(InitAttempt { map: Some(map), quality, .. }) => {
                self.summary.init_frames = Some((reference.frame_index, kf.frame_index));
                self.summary.init_quality = Some(quality);
                self.map = map;
                self.map.last_global_time = kf.timestamp;
                for kfr in &self.map.keyframes {
                    for (t, px) in &kfr.tracks {
                        self.track_views.entry(*t).or_default().push((kfr.id, *px));
                    }
                }
                self.last_keyframe = self.map.keyframes.last().cloned();
                self.stats = TrackStats::default();
                self.status = PipelineStatus::Tracking;
                log::info!("initialized with {} points", self.map.points.len());
            }
            Ok(a) => {
                self.summary.init_quality = Some(a.quality);
                self.reference = Some(reference);
            }
            Err(e) => {
                log::debug!("init attempt failed: {e}");
                self.reference = Some(reference);
            }
        }
        Ok(())
    }

    fn record_tracks(&mut self, id: KeyframeId) {
        for (t, px) in &self.map.keyframes[id].tracks {
            self.track_views.entry(*t).or_default().push((id, *px));
        }
    }

    /// Observations of existing map points seen by the keyframe's tracks.
    fn attach_mapped(&mut self, id: KeyframeId) -> usize {
        let k = *self.frontend.intrinsics();
        let pose = self.map.keyframes[id].pose;
        let pairs: Vec<(PointId, Vec2)> = self.map.keyframes[id]
            .tracks
            .iter()
            .filter_map(|(t, px)| self.map.track_points.get(t).filter(|p| self.map.points.contains_key(p)).map(|p| (*p, *px)))
            .collect();
        let mut n = 0;
        for (p, px) in pairs {
            let ok = ba::project(&pose, &self.map.points[&p].position, &k).is_some_and(|q| (q - px).norm() <= self.config.ba.outlier_px);
            if ok {
                self.map.add_observation(id, p, px);
                n += 1;
            }
        }
        n
    }

    /// Triangulates every unmapped track of the keyframe seen by at least one earlier keyframe.
    fn triangulate_new(&mut self, id: KeyframeId) -> usize {
        let k = *self.frontend.intrinsics();
        let candidates: Vec<TrackId> = self.map.keyframes[id]
            .tracks
            .keys()
            .filter(|t| !self.map.track_points.get(t).is_some_and(|p| self.map.points.contains_key(p)))
            .copied()
            .collect();
        let mut added = 0;
        for t in candidates {
            let Some(history) = self.track_views.get(&t) else { continue };
            if history.len() < 2 {
                continue;
            }
            let views: Vec<(Pose, Vec2)> = history.iter().map(|(kf, px)| (self.map.keyframes[*kf].pose, *px)).collect();
            if let Some(x) = triangulate_views(&views, &k, &self.config) {
                let history = history.clone();
                let p = self.map.add_point(x);
                for (kf, px) in history {
                    self.map.add_observation(kf, p, px);
                }
                self.map.track_points.insert(t, p);
                added += 1;
            }
        }
        added
    }

    fn track_new_keyframe(&mut self, kf: Keyframe) -> Result<()> {
        let k = *self.frontend.intrinsics();
        let t_pose = Instant::now();
        let pairs: Vec<(Vec3, Vec2)> = kf
            .tracks
            .iter()
            .filter_map(|(t, px)| self.map.track_points.get(t).and_then(|p| self.map.points.get(p)).map(|mp| (mp.position, *px)))
            .collect();
        let world: Vec<Vec3> = pairs.iter().map(|p| p.0).collect();
        let image: Vec<Vec2> = pairs.iter().map(|p| normalized(&k, &p.1)).collect();
        let seed = self.next_seed();
        let pnp = pnp_resection(&world, &image, &pnp_params(&self.config, &k, seed))
            .ok()
            .filter(|e| e.inliers.len() >= self.config.ransac.min_pnp_inliers);
        self.summary.timings.pose += ms(t_pose);
        let id = match pnp {
            Some(est) => {
                let mut kf = kf;
                kf.pose = est.pose;
                let id = self.map.add_keyframe(kf);
                self.attach_mapped(id);
                self.record_tracks(id);
                id
            }
            None => match self.recover(kf)? {
                Some(id) => id,
                None => return Ok(()),
            },
        };

        let t_map = Instant::now();
        self.triangulate_new(id);
        self.map.update_covisibility();
        self.summary.timings.map += ms(t_map);

        let t_ba = Instant::now();
        ba::local_ba(&mut self.map, id, &k, &self.config.ba);
        self.map.update_covisibility();
        self.map.keyframes_since_global += 1;
        let timestamp = self.map.keyframes[id].timestamp;
        if self.map.keyframes_since_global >= self.config.ba.global_interval_kf || timestamp - self.map.last_global_time >= self.config.ba.global_interval_s {
            ba::global_ba(&mut self.map, &k, &self.config.ba);
            self.map.keyframes_since_global = 0;
            self.map.last_global_time = timestamp;
        }
        self.summary.timings.local_ba += ms(t_ba);

        if self.config.loop_closure.enabled {
            let t_loop = Instant::now();
            self.close_loop(id);
            self.summary.timings.map += ms(t_loop);
        }
        self.last_keyframe = Some(self.map.keyframes[id].clone());
        Ok(())
    }

    /// Track-loss recovery. `None` when it fails and tracking stops.
    fn recover(&mut self, kf: Keyframe) -> Result<Option<KeyframeId>> {
        let k = *self.frontend.intrinsics();
        let n = self.map.keyframes.len();
        let frame_index = kf.frame_index;
        self.summary.recoveries += 1;
        let t = Instant::now();
        let seed = self.next_seed();
        let ctx = if n >= 2 {
            recover_pose(&self.map, n - 2, n - 1, &kf.tracks, &k, &self.config, seed)
        } else {
            Err(Error::NotEnoughData { needed: 2, got: n })
        };
        self.summary.timings.pose += ms(t);
        let ctx = match ctx {
            Ok(c) => c,
            Err(e) => {
                log::warn!("track-loss recovery failed at frame {frame_index}: {e}");
                self.lose(frame_index);
                return Ok(None);
            }
        };
        let mut kf = kf;
        kf.pose = ctx.pose();
        let id = self.map.add_keyframe(kf);
        self.attach_mapped(id);
        self.record_tracks(id);
        self.triangulate_new(id);
        self.map.update_covisibility();
        ba::local_ba(&mut self.map, id, &k, &self.config.ba);
        let pose = self.map.keyframes[id].pose;
        let good = self.map.keyframes[id]
            .observations
            .iter()
            .filter(|(p, px)| ba::project(&pose, &self.map.points[p].position, &k).is_some_and(|q| (q - *px).norm() <= self.config.ba.outlier_px))
            .count();
        if good <= self.config.recovery_min_inliers {
            log::warn!("track-loss recovery at frame {frame_index}: only {good} inliers after local BA");
            self.map.pop_keyframe();
            for views in self.track_views.values_mut() {
                views.retain(|(k, _)| *k != id);
            }
            self.lose(frame_index);
            return Ok(None);
        }
        log::info!("recovered keyframe at frame {frame_index} (lambda {:.4}, {} omega tracks)", ctx.lambda, ctx.omega_tracks.len());
        Ok(Some(id))
    }

    /// Relocalization is not implemented: tracking stops at this frame.
    fn lose(&mut self, frame_index: usize) {
        self.status = PipelineStatus::Lost { frame_index };
        self.summary.lost_at = Some(frame_index);
    }

    fn close_loop(&mut self, id: KeyframeId) {
        let k = *self.frontend.intrinsics();
        let cfg = self.config.loop_closure.clone();
        let Some(candidate) = detect_loop(&self.map, id, &cfg) else { return };
        let (a, b) = (&self.map.keyframes[id], &self.map.keyframes[candidate.keyframe]);
        let pa: Vec<(TrackId, Vec2)> = a.tracks.iter().map(|(t, p)| (*t, *p)).collect();
        let pb: Vec<(TrackId, Vec2)> = b.tracks.iter().map(|(t, p)| (*t, *p)).collect();
        let (ia, ib) = (a.image.clone(), b.image.clone());
        let matches = self.frontend.match_keyframes(KeyframeView { image: &ia, points: &pa }, KeyframeView { image: &ib, points: &pb });
        let pairs: Vec<(PointId, PointId)> = matches
            .iter()
            .filter_map(|(ta, tb)| Some((*self.map.track_points.get(ta)?, *self.map.track_points.get(tb)?)))
            .collect();
        let seed = self.next_seed();
        let Some((sim, inliers)) = validate_loop(&self.map, id, &pairs, &cfg, seed) else { return };
        log::info!("loop closed: keyframe {id} with {} ({} inliers, scale {:.4})", candidate.keyframe, inliers.len(), sim.scale);
        merge_loop(&mut self.map, id, candidate.keyframe, &sim, &inliers, &k, &cfg, &self.config.ba);
        self.map.keyframes_since_global = 0;
        self.map.last_global_time = self.map.keyframes[id].timestamp;
        self.summary.loops_closed += 1;
    }
}
