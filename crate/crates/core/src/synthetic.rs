//! Synthetic scenes for tests and examples.
//!
//! [`SyntheticFrontend`] projects a wireframe of boxes along a circular
//! camera path and hands exact (optionally noisy) edge-point tracks to the
//! pipeline. [`write_textured_sequence`] renders a textured scene to a
//! TUM-style directory so the image frontend can be exercised end to end.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ba::project;
use crate::dataset::{CameraIntrinsics, ImageFrame, TrajectoryRecord};
use crate::edges::{link_edges, thin_edges, EdgeMask};
use crate::error::{Error, Result};
use crate::flow::TrackId;
use crate::frontend::{FrameObservation, Frontend, KeyframeUpdate, KeyframeView};
use crate::geometry::{unit, Pose};
use crate::{Mat3, Vec2, Vec3};

/// Sets the 8-connected pixels of the segment `a`-`b` (pixel centres at
/// integer coordinates). Pixels outside the mask are skipped.
pub fn rasterize_segment(mask: &mut EdgeMask, a: (f64, f64), b: (f64, f64)) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let steps = dx.abs().max(dy.abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = ((a.0 + t * dx).round(), (a.1 + t * dy).round());
        if x >= 0.0 && y >= 0.0 && (x as usize) < mask.width && (y as usize) < mask.height {
            mask.set(x as usize, y as usize, true);
        }
    }
}

pub fn rasterize_polyline(mask: &mut EdgeMask, pts: &[(f64, f64)], closed: bool) {
    for w in pts.windows(2) {
        rasterize_segment(mask, w[0], w[1]);
    }
    if closed && pts.len() > 2 {
        rasterize_segment(mask, pts[pts.len() - 1], pts[0]);
    }
}

/// Camera at `center` looking at `target`, image y axis roughly along world +y.
pub fn look_at(center: Vec3, target: Vec3) -> Pose {
    let z = unit(target - center);
    let x = unit(Vec3::y().cross(&z));
    let y = z.cross(&x);
    Pose::new(Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]), center)
}

/// Line segments in 3D and points sampled along them.
#[derive(Clone, Debug, PartialEq)]
pub struct WireframeScene {
    pub segments: Vec<(Vec3, Vec3)>,
    pub points: Vec<Vec3>,
}

impl WireframeScene {
    /// `count` axis-aligned boxes scattered around the origin, edges sampled every `spacing`.
    pub fn boxes(count: usize, spacing: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut segments = Vec::new();
        for i in 0..count {
            let a = i as f64 / count as f64 * std::f64::consts::TAU + rng.random_range(-0.3..0.3);
            let r = if i == 0 { 0.0 } else { rng.random_range(1.0..2.2) };
            let c = Vec3::new(r * a.cos(), rng.random_range(-0.6..0.6), r * a.sin());
            let h = Vec3::new(rng.random_range(0.3..0.7), rng.random_range(0.3..0.8), rng.random_range(0.3..0.7));
            let corner = |sx: f64, sy: f64, sz: f64| c + Vec3::new(sx * h.x, sy * h.y, sz * h.z);
            for (s1, s2) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                segments.push((corner(-1.0, s1, s2), corner(1.0, s1, s2)));
                segments.push((corner(s1, -1.0, s2), corner(s1, 1.0, s2)));
                segments.push((corner(s1, s2, -1.0), corner(s1, s2, 1.0)));
            }
        }
        let mut points = Vec::new();
        for (a, b) in &segments {
            let n = ((b - a).norm() / spacing).floor() as usize;
            // skip the corners, they are shared by three edges
            for k in 1..n {
                points.push(a + (b - a) * (k as f64 / n as f64));
            }
        }
        Self { segments, points }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub fps: f64,
    /// Angular speed of the camera along the circle, degrees per second.
    pub deg_per_s: f64,
    pub frames: usize,
    pub radius: f64,
    pub camera_height: f64,
    pub boxes: usize,
    pub point_spacing: f64,
    pub noise_px: f64,
    /// Track lifetime range in frames; expired scene points are re-tracked under a new id.
    pub lifetime: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            focal: 500.0,
            fps: 10.0,
            deg_per_s: 14.0,
            frames: 191,
            radius: 6.0,
            camera_height: -1.0,
            boxes: 6,
            point_spacing: 0.03,
            noise_px: 0.3,
            lifetime: (30, 80),
            seed: 7,
        }
    }
}

/// A scene, its camera path and the calibration.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub config: SyntheticConfig,
    pub scene: WireframeScene,
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<Pose>,
    pub timestamps: Vec<f64>,
}

impl SyntheticSequence {
    pub fn circle(config: SyntheticConfig) -> Self {
        let scene = WireframeScene::boxes(config.boxes, config.point_spacing, config.seed);
        let intrinsics = CameraIntrinsics {
            fx: config.focal,
            fy: config.focal,
            cx: (config.width as f64 - 1.0) / 2.0,
            cy: (config.height as f64 - 1.0) / 2.0,
            r: 0.0,
        };
        let mut poses = Vec::new();
        let mut timestamps = Vec::new();
        for i in 0..config.frames {
            let t = i as f64 / config.fps;
            let a = (config.deg_per_s * t).to_radians();
            let c = Vec3::new(config.radius * a.sin(), config.camera_height, -config.radius * a.cos());
            poses.push(look_at(c, Vec3::zeros()));
            timestamps.push(t);
        }
        Self {
            config,
            scene,
            intrinsics,
            poses,
            timestamps,
        }
    }

    pub fn groundtruth(&self) -> Vec<TrajectoryRecord> {
        self.poses
            .iter()
            .zip(&self.timestamps)
            .map(|(p, t)| TrajectoryRecord {
                timestamp: *t,
                position: p.center,
                orientation: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(p.rotation.transpose())),
            })
            .collect()
    }

    /// Largest distance between two camera centres.
    pub fn trajectory_diameter(&self) -> f64 {
        let mut d = 0.0f64;
        for a in &self.poses {
            for b in &self.poses {
                d = d.max((a.center - b.center).norm());
            }
        }
        d
    }

    fn inside(&self, px: &Vec2, margin: f64) -> bool {
        px.x >= margin && px.y >= margin && px.x <= self.config.width as f64 - 1.0 - margin && px.y <= self.config.height as f64 - 1.0 - margin
    }

    /// Edge mask of the projected wireframe in frame `i`.
    pub fn edge_mask(&self, i: usize) -> EdgeMask {
        let pose = &self.poses[i];
        let mut mask = EdgeMask::new(self.config.width, self.config.height);
        for (a, b) in &self.scene.segments {
            if let (Some(pa), Some(pb)) = (project(pose, a, &self.intrinsics), project(pose, b, &self.intrinsics)) {
                rasterize_segment(&mut mask, (pa.x, pa.y), (pb.x, pb.y));
            }
        }
        thin_edges(&mask)
    }
}

#[derive(Clone, Copy, Debug)]
struct LiveTrack {
    point: usize,
    expires: usize,
    pixel: Vec2,
}

/// Exact projections of the scene points as tracks, with Gaussian pixel noise.
pub struct SyntheticFrontend {
    sequence: SyntheticSequence,
    next_frame: usize,
    current: Option<usize>,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    live: BTreeMap<TrackId, LiveTrack>,
    tracked_points: BTreeMap<usize, TrackId>,
    track_points: BTreeMap<TrackId, usize>,
    next_id: TrackId,
    min_chain_len: usize,
}

/// Tracks are kept this far from the image border, pixels.
const BORDER_PX: f64 = 10.0;

impl SyntheticFrontend {
    pub fn new(sequence: SyntheticSequence) -> Self {
        let seed = sequence.config.seed;
        let sigma = sequence.config.noise_px.max(0.0);
        Self {
            sequence,
            next_frame: 0,
            current: None,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5),
            noise: Normal::new(0.0, sigma).expect("finite sigma"),
            live: BTreeMap::new(),
            tracked_points: BTreeMap::new(),
            track_points: BTreeMap::new(),
            next_id: 0,
            min_chain_len: 8,
        }
    }

    pub fn sequence(&self) -> &SyntheticSequence {
        &self.sequence
    }

    /// Scene point behind a track.
    pub fn scene_point(&self, track: TrackId) -> Option<usize> {
        self.track_points.get(&track).copied()
    }

    fn observe(&mut self, frame: usize, point: usize) -> Option<Vec2> {
        let seq = &self.sequence;
        let px = project(&seq.poses[frame], &seq.scene.points[point], &seq.intrinsics)?;
        if !seq.inside(&px, BORDER_PX) {
            return None;
        }
        let n = Vec2::new(self.noise.sample(&mut self.rng), self.noise.sample(&mut self.rng));
        Some(px + n)
    }
}

impl Frontend for SyntheticFrontend {
    fn intrinsics(&self) -> &CameraIntrinsics {
        &self.sequence.intrinsics
    }

    fn next_frame(&mut self) -> Option<Result<FrameObservation>> {
        let i = self.next_frame;
        if i >= self.sequence.poses.len() {
            return None;
        }
        self.next_frame += 1;
        self.current = Some(i);
        let ids: Vec<TrackId> = self.live.keys().copied().collect();
        for id in ids {
            let tr = self.live[&id];
            let obs = if tr.expires <= i { None } else { self.observe(i, tr.point) };
            match obs {
                Some(px) => self.live.get_mut(&id).expect("live").pixel = px,
                None => {
                    self.live.remove(&id);
                    self.tracked_points.remove(&tr.point);
                }
            }
        }
        let mask = self.sequence.edge_mask(i);
        let chains = link_edges(&mask, self.min_chain_len);
        let (w, h) = (self.sequence.config.width, self.sequence.config.height);
        let pixels: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let image = match ImageFrame::new(i, self.sequence.timestamps[i], w, h, pixels) {
            Ok(f) => f,
            Err(e) => return Some(Err(e)),
        };
        Some(Ok(FrameObservation {
            frame_index: i,
            timestamp: self.sequence.timestamps[i],
            width: w,
            height: h,
            points: self.live.iter().map(|(id, t)| (*id, t.pixel)).collect(),
            chains,
            mask,
            image,
        }))
    }

    fn on_keyframe(&mut self) -> KeyframeUpdate {
        let Some(i) = self.current else {
            return KeyframeUpdate::default();
        };
        let (lo, hi) = self.sequence.config.lifetime;
        let mut spawned = Vec::new();
        for p in 0..self.sequence.scene.points.len() {
            if self.tracked_points.contains_key(&p) {
                continue;
            }
            let Some(px) = self.observe(i, p) else { continue };
            let id = self.next_id;
            self.next_id += 1;
            let expires = i + self.rng.random_range(lo..=hi.max(lo));
            self.live.insert(id, LiveTrack { point: p, expires, pixel: px });
            self.tracked_points.insert(p, id);
            self.track_points.insert(id, p);
            spawned.push((id, px));
        }
        KeyframeUpdate {
            rejected: Vec::new(),
            spawned,
        }
    }

    /// Pairs tracks that follow the same scene point.
    fn match_keyframes(&mut self, a: KeyframeView<'_>, b: KeyframeView<'_>) -> Vec<(TrackId, TrackId)> {
        let by_point: BTreeMap<usize, TrackId> = b.points.iter().filter_map(|(t, _)| Some((*self.track_points.get(t)?, *t))).collect();
        a.points
            .iter()
            .filter_map(|(t, _)| {
                let p = self.track_points.get(t)?;
                by_point.get(p).filter(|tb| *tb != t).map(|tb| (*t, *tb))
            })
            .collect()
    }
}

/// Procedural texture: random rectangles of random gray on a mid-gray base.
fn texture(size: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tex = vec![128.0f32; size * size];
    for _ in 0..size / 3 {
        let (w, h) = (rng.random_range(size / 40..size / 8), rng.random_range(size / 40..size / 8));
        let (x0, y0) = (rng.random_range(0..size - w), rng.random_range(0..size - h));
        let v = rng.random_range(0.0..255.0f32);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                tex[y * size + x] = v;
            }
        }
    }
    tex
}

fn sample_texture(tex: &[f32], size: usize, u: f64, v: f64) -> f32 {
    let x = (u * size as f64 - 0.5).clamp(0.0, size as f64 - 1.001);
    let y = (v * size as f64 - 0.5).clamp(0.0, size as f64 - 1.001);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let at = |xx: usize, yy: usize| tex[yy.min(size - 1) * size + xx.min(size - 1)];
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// A textured square: `origin + s * u_axis + t * v_axis`, s, t in [0, 1].
struct Panel {
    origin: Vec3,
    u_axis: Vec3,
    v_axis: Vec3,
    texture: Vec<f32>,
}

const TEXTURE_SIZE: usize = 512;

impl Panel {
    fn hit(&self, c: &Vec3, d: &Vec3) -> Option<(f64, f32)> {
        let n = self.u_axis.cross(&self.v_axis);
        let denom = n.dot(d);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.origin - c)) / denom;
        if t <= 1e-6 {
            return None;
        }
        let p = c + d * t - self.origin;
        let s = p.dot(&self.u_axis) / self.u_axis.norm_squared();
        let r = p.dot(&self.v_axis) / self.v_axis.norm_squared();
        ((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&r)).then(|| (t, sample_texture(&self.texture, TEXTURE_SIZE, s, r)))
    }
}

/// Renders the textured floor-and-walls scene seen along the circular path
/// of `config` and writes `rgb/*.png`, `rgb.txt`, `groundtruth.txt` and
/// `calib.txt` into `dir`.
pub fn write_textured_sequence(dir: &Path, config: &SyntheticConfig) -> Result<SyntheticSequence> {
    let seq = SyntheticSequence::circle(config.clone());
    let s = 4.0;
    let panels = [Panel {
            origin: Vec3::new(-s, 1.2, -s),
            u_axis: Vec3::new(2.0 * s, 0.0, 0.0),
            v_axis: Vec3::new(0.0, 0.0, 2.0 * s),
            texture: texture(TEXTURE_SIZE, config.seed),
        },
        Panel {
            origin: Vec3::new(-1.5, -1.5, -1.0),
            u_axis: Vec3::new(3.0, 0.0, 0.0),
            v_axis: Vec3::new(0.0, 2.7, 0.0),
            texture: texture(TEXTURE_SIZE, config.seed + 1),
        },
        Panel {
            origin: Vec3::new(-1.0, -1.5, -1.5),
            u_axis: Vec3::new(0.0, 0.0, 3.0),
            v_axis: Vec3::new(0.0, 2.7, 0.0),
            texture: texture(TEXTURE_SIZE, config.seed + 2),
        }];
    let rgb = dir.join("rgb");
    fs::create_dir_all(&rgb).map_err(|e| Error::io(&rgb, e))?;
    let k = seq.intrinsics;
    let mut index = String::from("# timestamp filename\n");
    let (w, h) = (config.width, config.height);
    for (i, pose) in seq.poses.iter().enumerate() {
        let rt = pose.rotation.transpose();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                // 2x2 supersampling
                let mut acc = 0.0f32;
                for (ox, oy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                    let n = Vec3::new((x as f64 + ox - k.cx) / k.fx, (y as f64 + oy - k.cy) / k.fy, 1.0);
                    let d = rt * n;
                    let hit = panels
                        .iter()
                        .filter_map(|p| p.hit(&pose.center, &d))
                        .min_by(|a, b| a.0.total_cmp(&b.0));
                    acc += hit.map_or(40.0, |h| h.1);
                }
                img.put_pixel(x as u32, y as u32, image::Luma([(acc / 4.0).round().clamp(0.0, 255.0) as u8]));
            }
        }
        let name = format!("rgb/{i:05}.png");
        let path = dir.join(&name);
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        writeln!(index, "{:.6} {}", seq.timestamps[i], name).expect("write to string");
    }
    let index_path = dir.join("rgb.txt");
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    crate::dataset::write_trajectory_tum(&seq.groundtruth(), &dir.join("groundtruth.txt"))?;
    k.write_file(&dir.join("calib.txt"))?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_raster_is_connected() {
        let mut m = EdgeMask::new(50, 50);
        rasterize_segment(&mut m, (3.2, 4.7), (41.0, 30.1));
        assert!(m.get(3, 5) && m.get(41, 30));
        assert_eq!(m.count(), 39);
        assert!(!m.has_thick_block());
    }

    #[test]
    fn look_at_centres_target() {
        let pose = look_at(Vec3::new(3.0, -1.0, -4.0), Vec3::new(0.5, 0.2, 0.1));
        let p = pose.transform(&Vec3::new(0.5, 0.2, 0.1));
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
        assert!(pose.is_valid(1e-12));
    }

    #[test]
    fn frontend_tracks_follow_projections() {
        let cfg = SyntheticConfig {
            frames: 12,
            noise_px: 0.0,
            ..SyntheticConfig::default()
        };
        let mut fe = SyntheticFrontend::new(SyntheticSequence::circle(cfg));
        let first = fe.next_frame().unwrap().unwrap();
        assert!(first.points.is_empty());
        let spawned = fe.on_keyframe().spawned;
        assert!(spawned.len() > 1000, "{}", spawned.len());
        let f1 = fe.next_frame().unwrap().unwrap();
        let seq = fe.sequence().clone();
        for (t, px) in &f1.points {
            let p = fe.scene_point(*t).unwrap();
            let q = project(&seq.poses[1], &seq.scene.points[p], &seq.intrinsics).unwrap();
            assert!((q - px).norm() < 1e-9);
        }
        assert!(!f1.chains.is_empty());
    }
}
