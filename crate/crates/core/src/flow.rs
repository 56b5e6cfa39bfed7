//! Edge-point tracking: bidirectional pyramidal Lucas-Kanade and the
//! correspondence filters applied after it.

use std::collections::{BTreeMap, HashMap};

use crate::config::FlowConfig;
use crate::dataset::ImageFrame;
use crate::edges::EdgeMask;
use crate::error::{Error, Result};
use crate::geometry::{epiline, fundamental_rank, Direction};
use crate::image::{build_pyramid, FloatImage};
use crate::{Mat3, Vec2, Vec3};

pub type TrackId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackStatus {
    Live,
    Dead,
}

/// A point followed across consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PointTrack {
    pub track_id: TrackId,
    /// Frame index to pixel.
    pub positions: BTreeMap<usize, Vec2>,
    pub status: TrackStatus,
    pub birth_keyframe: usize,
}

impl PointTrack {
    pub fn new(track_id: TrackId, frame: usize, position: Vec2, birth_keyframe: usize) -> Self {
        let mut positions = BTreeMap::new();
        positions.insert(frame, position);
        Self {
            track_id,
            positions,
            status: TrackStatus::Live,
            birth_keyframe,
        }
    }

    pub fn last(&self) -> Vec2 {
        *self.positions.values().next_back().expect("track has a position")
    }

    /// Appends the next frame's position. Dead tracks stay dead.
    pub fn extend(&mut self, frame: usize, position: Vec2) -> bool {
        if self.status == TrackStatus::Dead {
            return false;
        }
        self.positions.insert(frame, position);
        true
    }

    pub fn kill(&mut self) {
        self.status = TrackStatus::Dead;
    }

    pub fn is_live(&self) -> bool {
        self.status == TrackStatus::Live
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowParams {
    /// Odd window side, pixels.
    pub window: usize,
    pub pyramid_levels: usize,
    pub max_iters: usize,
    /// Convergence threshold on the update, pixels.
    pub eps: f64,
    pub bidir_tol: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self::from_config(&FlowConfig::default())
    }
}

impl FlowParams {
    pub fn from_config(c: &FlowConfig) -> Self {
        Self {
            window: c.window,
            pyramid_levels: c.levels,
            max_iters: c.max_iters,
            eps: c.eps,
            bidir_tol: c.bidir_tol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("flow window {} must be odd and >= 3", self.window)));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LkResult {
    pub position: Vec2,
    pub converged: bool,
}

/// Tracks `points` from `prev` to `next`.
pub fn pyramidal_lk(prev: &ImageFrame, next: &ImageFrame, points: &[Vec2], params: &FlowParams) -> Result<Vec<LkResult>> {
    if prev.width != next.width || prev.height != next.height {
        return Err(Error::InvalidArgument("frames differ in size".into()));
    }
    params.validate()?;
    let a = build_pyramid(&FloatImage::from_frame(prev), params.pyramid_levels);
    let b = build_pyramid(&FloatImage::from_frame(next), params.pyramid_levels);
    Ok(pyramidal_lk_pyr(&a, &b, points, params))
}

/// Same as [`pyramidal_lk`] on prebuilt pyramids (level 0 first).
pub fn pyramidal_lk_pyr(prev: &[FloatImage], next: &[FloatImage], points: &[Vec2], params: &FlowParams) -> Vec<LkResult> {
    points.iter().map(|p| track_point(prev, next, p, None, params)).collect()
}

/// Tracks with an initial displacement guess per point (level-0 pixels).
pub fn pyramidal_lk_guess(prev: &[FloatImage], next: &[FloatImage], points: &[Vec2], guesses: &[Vec2], params: &FlowParams) -> Vec<LkResult> {
    points
        .iter()
        .zip(guesses)
        .map(|(p, g)| track_point(prev, next, p, Some(*g), params))
        .collect()
}

fn inside(img: &FloatImage, p: &Vec2, margin: f64) -> bool {
    p.x >= margin && p.y >= margin && p.x <= img.width as f64 - 1.0 - margin && p.y <= img.height as f64 - 1.0 - margin
}

fn track_point(prev: &[FloatImage], next: &[FloatImage], p: &Vec2, guess: Option<Vec2>, params: &FlowParams) -> LkResult {
    let hw = (params.window / 2) as isize;
    let fail = LkResult {
        position: *p,
        converged: false,
    };
    if !p.x.is_finite() || !p.y.is_finite() || !inside(&prev[0], p, hw as f64) {
        return fail;
    }
    let levels = prev.len().min(next.len());
    let side = (2 * hw + 1) as usize;
    let n = side * side;
    let mut g = guess.unwrap_or_else(Vec2::zeros) / f64::powi(2.0, levels as i32 - 1);
    let mut padded = vec![0.0f32; (side + 2) * (side + 2)];
    let mut template = vec![0.0f64; n];
    let mut ix = vec![0.0f64; n];
    let mut iy = vec![0.0f64; n];
    let mut warped = vec![0.0f32; n];
    let mut converged = false;
    for level in (0..levels).rev() {
        let scale = f64::powi(2.0, level as i32);
        let (a, b) = (&prev[level], &next[level]);
        let pl = p / scale;
        a.sample_window(pl.x, pl.y, hw + 1, &mut padded);
        let (mut gxx, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
        let stride = side + 2;
        for r in 0..side {
            for c in 0..side {
                let at = |dr: usize, dc: usize| padded[(r + dr) * stride + c + dc] as f64;
                let k = r * side + c;
                template[k] = at(1, 1);
                let gx = 0.5 * (at(1, 2) - at(1, 0));
                let gy = 0.5 * (at(2, 1) - at(0, 1));
                ix[k] = gx;
                iy[k] = gy;
                gxx += gx * gx;
                gxy += gx * gy;
                gyy += gy * gy;
            }
        }
        let det = gxx * gyy - gxy * gxy;
        let tr = gxx + gyy;
        let min_eig = 0.5 * (tr - ((gxx - gyy).powi(2) + 4.0 * gxy * gxy).sqrt());
        if min_eig / n as f64 <= 1e-3 || det <= 0.0 {
            return fail;
        }
        let mut v = Vec2::zeros();
        converged = false;
        for _ in 0..params.max_iters {
            let c = pl + g + v;
            b.sample_window(c.x, c.y, hw, &mut warped);
            let (mut bx, mut by) = (0.0, 0.0);
            for k in 0..n {
                let diff = template[k] - warped[k] as f64;
                bx += diff * ix[k];
                by += diff * iy[k];
            }
            let eta = Vec2::new((gyy * bx - gxy * by) / det, (gxx * by - gxy * bx) / det);
            v += eta;
            if eta.norm() < params.eps {
                converged = true;
                break;
            }
        }
        if level > 0 {
            g = 2.0 * (g + v);
        } else {
            g += v;
        }
    }
    let q = p + g;
    LkResult {
        position: q,
        converged: converged && inside(&next[0], &q, 0.0),
    }
}

/// Indices whose forward and backward tracks both converged and whose
/// round trip lands within `tol` of the start.
pub fn bidirectional_filter(original: &[Vec2], forward: &[LkResult], backward: &[LkResult], tol: f64) -> Vec<usize> {
    original
        .iter()
        .zip(forward.iter().zip(backward))
        .enumerate()
        .filter(|(_, (o, (f, b)))| f.converged && b.converged && (b.position - *o).norm() <= tol)
        .map(|(i, _)| i)
        .collect()
}

/// Greedy thinning in the given order (oldest first): a point survives if
/// no earlier survivor is closer than `min_dist`.
pub fn dedup_points(points: &[Vec2], min_dist: f64) -> Vec<usize> {
    if min_dist <= 0.0 {
        return (0..points.len()).collect();
    }
    let cell = |p: &Vec2| ((p.x / min_dist).floor() as i64, (p.y / min_dist).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut kept = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let (cx, cy) = cell(p);
        let clash = (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                grid.get(&(cx + dx, cy + dy))
                    .is_some_and(|v| v.iter().any(|&j| (points[j] - p).norm() < min_dist))
            })
        });
        if !clash {
            grid.entry((cx, cy)).or_default().push(i);
            kept.push(i);
        }
    }
    kept
}

/// Indices of points with an edge pixel within Chebyshev distance `radius`.
pub fn snap_filter(points: &[Vec2], mask: &EdgeMask, radius: usize) -> Vec<usize> {
    let r = radius as isize;
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let (x, y) = (p.x.round() as isize, p.y.round() as isize);
            (-r..=r).any(|dy| (-r..=r).any(|dx| mask.get_i(x + dx, y + dy)))
        })
        .map(|(i, _)| i)
        .collect()
}

/// Three-keyframe consistency check on the middle view. `f_ab` maps points
/// of view a to epilines in b, `f_cb` likewise from c. Returns `None` when
/// either matrix is not rank 2, meaning the filter does not apply.
pub fn three_view_filter(a: &[Vec2], b: &[Vec2], c: &[Vec2], f_ab: &Mat3, f_cb: &Mat3, tol: f64) -> Option<Vec<bool>> {
    if fundamental_rank(f_ab) != 2 || fundamental_rank(f_cb) != 2 {
        log::warn!("three-view filter skipped: fundamental matrix is not rank 2");
        return None;
    }
    let intersection_tol = 2.0 * tol;
    Some(
        (0..b.len())
            .map(|i| {
                let (Ok(l1), Ok(l2)) = (epiline(f_ab, &a[i], Direction::Forward), epiline(f_cb, &c[i], Direction::Forward)) else {
                    return false;
                };
                let hb = Vec3::new(b[i].x, b[i].y, 1.0);
                if l1.dot(&hb).abs() > tol || l2.dot(&hb).abs() > tol {
                    return false;
                }
                let sin = l1.x * l2.y - l1.y * l2.x;
                if sin.abs() < 1e-3 {
                    return true;
                }
                let x = l1.cross(&l2);
                let p = Vec2::new(x.x / x.z, x.y / x.z);
                (p - b[i]).norm() <= intersection_tol
            })
            .collect(),
    )
}
