//! Loop detection from edge-shape moments and quadrant statistics, Horn
//! similarity validation and loop merging.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::{BaConfig, LoopConfig};
use crate::dataset::{CameraIntrinsics, ImageFrame};
use crate::edges::EdgeMask;
use crate::error::{Error, Result};
use crate::geometry::{angle_between, horn_similarity_ransac, Similarity};
use crate::map::{KeyframeId, PointId, SlamMap};
use crate::Vec3;

/// Hu's seven invariants, sign-preserving `log10` magnitudes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentSignature(pub [f64; 7]);

impl MomentSignature {
    pub fn l1(&self, other: &MomentSignature) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Largest per-invariant difference.
    pub fn max_deviation(&self, other: &MomentSignature) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Raw Hu invariants of a set of unit-mass pixels.
///
/// The mask holds one-pixel-wide curves, whose mass grows linearly with
/// scale, so the central moments are normalized by `mu00^(1 + p + q)`.
pub fn hu_invariants(mask: &EdgeMask) -> Result<[f64; 7]> {
    let n = mask.count();
    if n == 0 {
        return Err(Error::InvalidArgument("empty edge mask".into()));
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for (x, y) in mask.iter_set() {
        sx += x as f64;
        sy += y as f64;
    }
    let (cx, cy) = (sx / n as f64, sy / n as f64);
    let mut mu = [[0.0f64; 4]; 4];
    for (x, y) in mask.iter_set() {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let xp = [1.0, dx, dx * dx, dx * dx * dx];
        let yp = [1.0, dy, dy * dy, dy * dy * dy];
        for p in 0..4 {
            for q in 0..4 - p {
                mu[p][q] += xp[p] * yp[q];
            }
        }
    }
    let m00 = n as f64;
    let eta = |p: usize, q: usize| mu[p][q] / m00.powi(1 + (p + q) as i32);
    let (n20, n02, n11) = (eta(2, 0), eta(0, 2), eta(1, 1));
    let (n30, n03, n21, n12) = (eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2));
    let a = n30 + n12;
    let b = n21 + n03;
    let h1 = n20 + n02;
    let h2 = (n20 - n02).powi(2) + 4.0 * n11 * n11;
    let h3 = (n30 - 3.0 * n12).powi(2) + (3.0 * n21 - n03).powi(2);
    let h4 = a * a + b * b;
    let h5 = (n30 - 3.0 * n12) * a * (a * a - 3.0 * b * b) + (3.0 * n21 - n03) * b * (3.0 * a * a - b * b);
    let h6 = (n20 - n02) * (a * a - b * b) + 4.0 * n11 * a * b;
    let h7 = (3.0 * n21 - n03) * a * (a * a - 3.0 * b * b) - (n30 - 3.0 * n12) * b * (3.0 * a * a - b * b);
    Ok([h1, h2, h3, h4, h5, h6, h7])
}

pub fn moment_signature(mask: &EdgeMask) -> Result<MomentSignature> {
    let h = hu_invariants(mask)?;
    let mut s = [0.0; 7];
    for (o, v) in s.iter_mut().zip(h) {
        *o = if v == 0.0 { 0.0 } else { v.signum() * v.abs().log10() };
    }
    Ok(MomentSignature(s))
}

/// Per-quadrant statistics over a 4x4 grid.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadrantDescriptor {
    /// 8-connected edge components inside the quadrant.
    pub edge_count: [f64; 16],
    /// Edge pixels over quadrant area.
    pub density: [f64; 16],
    pub mean_intensity: [f64; 16],
}

impl QuadrantDescriptor {
    pub fn compute(mask: &EdgeMask, image: &ImageFrame) -> Self {
        let (w, h) = (mask.width, mask.height);
        let mut d = QuadrantDescriptor {
            edge_count: [0.0; 16],
            density: [0.0; 16],
            mean_intensity: [0.0; 16],
        };
        for qy in 0..4 {
            for qx in 0..4 {
                let (x0, x1) = (qx * w / 4, (qx + 1) * w / 4);
                let (y0, y1) = (qy * h / 4, (qy + 1) * h / 4);
                let area = ((x1 - x0) * (y1 - y0)).max(1) as f64;
                let mut seen = vec![false; (x1 - x0) * (y1 - y0)];
                let (mut pixels, mut components, mut intensity) = (0usize, 0usize, 0.0f64);
                for y in y0..y1 {
                    for x in x0..x1 {
                        if image.width == w && image.height == h {
                            intensity += image.get(x, y) as f64;
                        }
                        if !mask.get(x, y) {
                            continue;
                        }
                        pixels += 1;
                        let idx = (y - y0) * (x1 - x0) + (x - x0);
                        if seen[idx] {
                            continue;
                        }
                        components += 1;
                        seen[idx] = true;
                        let mut stack = vec![(x, y)];
                        while let Some((cx, cy)) = stack.pop() {
                            for dy in -1isize..=1 {
                                for dx in -1isize..=1 {
                                    let (nx, ny) = (cx as isize + dx, cy as isize + dy);
                                    if nx < x0 as isize || ny < y0 as isize || nx >= x1 as isize || ny >= y1 as isize {
                                        continue;
                                    }
                                    let (nx, ny) = (nx as usize, ny as usize);
                                    let j = (ny - y0) * (x1 - x0) + (nx - x0);
                                    if mask.get(nx, ny) && !seen[j] {
                                        seen[j] = true;
                                        stack.push((nx, ny));
                                    }
                                }
                            }
                        }
                    }
                }
                let q = qy * 4 + qx;
                d.edge_count[q] = components as f64;
                d.density[q] = pixels as f64 / area;
                d.mean_intensity[q] = intensity / area;
            }
        }
        d
    }

    fn stats(&self) -> [&[f64; 16]; 3] {
        [&self.edge_count, &self.density, &self.mean_intensity]
    }
}

/// Squared coefficient of variation across quadrants.
fn cv2(v: &[f64; 16]) -> f64 {
    let mean = v.iter().sum::<f64>() / 16.0;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
    if mean.abs() < 1e-12 {
        return 0.0;
    }
    var / (mean * mean)
}

/// Adaptive statistic weights: inversely proportional to each statistic's
/// spread across quadrants (scale-free form, averaged over both images),
/// normalized to sum to one.
pub fn quadrant_weights(a: &QuadrantDescriptor, b: &QuadrantDescriptor) -> [f64; 3] {
    let (sa, sb) = (a.stats(), b.stats());
    let mut w = [0.0; 3];
    for k in 0..3 {
        let spread = 0.5 * (cv2(sa[k]) + cv2(sb[k]));
        w[k] = 1.0 / (spread + 1e-3);
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

/// Fraction of quadrants whose weighted relative difference is within `tol`.
pub fn quadrant_match(a: &QuadrantDescriptor, b: &QuadrantDescriptor, weights: &[f64; 3], tol: f64) -> f64 {
    let (sa, sb) = (a.stats(), b.stats());
    let mut matched = 0;
    for q in 0..16 {
        let mut d = 0.0;
        for k in 0..3 {
            let (x, y) = (sa[k][q], sb[k][q]);
            let denom = x.abs().max(y.abs());
            if denom > 1e-12 {
                d += weights[k] * (x - y).abs() / denom;
            }
        }
        if d <= tol {
            matched += 1;
        }
    }
    matched as f64 / 16.0
}

/// Half moment similarity `exp(-L1 / tau)`, half quadrant vote fraction.
pub fn match_score(sig_a: &MomentSignature, quad_a: &QuadrantDescriptor, sig_b: &MomentSignature, quad_b: &QuadrantDescriptor, cfg: &LoopConfig) -> f64 {
    let moment = (-sig_a.l1(sig_b) / cfg.tau).exp();
    let w = quadrant_weights(quad_a, quad_b);
    let fraction = quadrant_match(quad_a, quad_b, &w, cfg.quadrant_tol);
    0.5 * (moment + fraction)
}

fn keyframe_score(map: &SlamMap, a: KeyframeId, b: KeyframeId, cfg: &LoopConfig) -> Option<f64> {
    let (ka, kb) = (&map.keyframes[a], &map.keyframes[b]);
    Some(match_score(ka.signature.as_ref()?, ka.quadrants.as_ref()?, kb.signature.as_ref()?, kb.quadrants.as_ref()?, cfg))
}

/// Lowest score against the most recent earlier keyframes viewing within
/// `neighbor_deg` of `kf`. `None` when no such keyframe exists.
pub fn compute_mmin(map: &SlamMap, kf: KeyframeId, cfg: &LoopConfig) -> Option<f64> {
    let dir = map.keyframes[kf].pose.viewing_direction();
    let scores: Vec<f64> = (0..kf)
        .rev()
        .filter(|&j| angle_between(&map.keyframes[j].pose.viewing_direction(), &dir).to_degrees() < cfg.neighbor_deg)
        .take(cfg.neighbor_count)
        .filter_map(|j| keyframe_score(map, kf, j, cfg))
        .collect();
    mmin_of(&scores)
}

pub fn mmin_of(scores: &[f64]) -> Option<f64> {
    scores.iter().copied().reduce(f64::min)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopCandidate {
    pub keyframe: KeyframeId,
    pub score: f64,
    pub similarity: Option<Similarity>,
    pub inliers: usize,
}

/// Best keyframe inside a run of at least three consecutive entries that
/// are eligible (`Some`) and score above `mmin`.
pub fn best_in_runs(scores: &[(KeyframeId, Option<f64>)], mmin: f64) -> Option<(KeyframeId, f64)> {
    let mut best: Option<(KeyframeId, f64)> = None;
    let mut run: Vec<(KeyframeId, f64)> = Vec::new();
    let flush = |run: &mut Vec<(KeyframeId, f64)>, best: &mut Option<(KeyframeId, f64)>| {
        if run.len() >= 3 {
            for &(k, s) in run.iter() {
                if best.is_none_or(|(_, b)| s > b) {
                    *best = Some((k, s));
                }
            }
        }
        run.clear();
    };
    let mut prev: Option<KeyframeId> = None;
    for &(k, s) in scores {
        let contiguous = prev.is_none_or(|p| k == p + 1);
        prev = Some(k);
        match s {
            Some(v) if v > mmin && contiguous => run.push((k, v)),
            Some(v) if v > mmin => {
                flush(&mut run, &mut best);
                run.push((k, v));
            }
            _ => flush(&mut run, &mut best),
        }
    }
    flush(&mut run, &mut best);
    best
}

/// Loop candidate for `kf` among earlier keyframes that share no map point with it.
pub fn detect_loop(map: &SlamMap, kf: KeyframeId, cfg: &LoopConfig) -> Option<LoopCandidate> {
    let mmin = compute_mmin(map, kf, cfg)?;
    let neighbours = map.neighbours(kf);
    let scores: Vec<(KeyframeId, Option<f64>)> = (0..kf)
        .map(|j| {
            if neighbours.contains(&j) {
                (j, None)
            } else {
                (j, keyframe_score(map, kf, j, cfg))
            }
        })
        .collect();
    let (keyframe, score) = best_in_runs(&scores, mmin)?;
    Some(LoopCandidate {
        keyframe,
        score,
        similarity: None,
        inliers: 0,
    })
}

/// Horn RANSAC on 3D-3D pairs `(point seen from kf, point seen from loop
/// keyframe)`. Accepted when the inlier count exceeds `cfg.min_inliers`.
pub fn validate_loop(map: &SlamMap, kf: KeyframeId, pairs: &[(PointId, PointId)], cfg: &LoopConfig, seed: u64) -> Option<(Similarity, Vec<(PointId, PointId)>)> {
    let pairs: Vec<(PointId, PointId)> = pairs
        .iter()
        .filter(|(a, b)| a != b && map.points.contains_key(a) && map.points.contains_key(b))
        .copied()
        .collect();
    if pairs.len() < 3 {
        return None;
    }
    let p: Vec<Vec3> = pairs.iter().map(|(a, _)| map.points[a].position).collect();
    let q: Vec<Vec3> = pairs.iter().map(|(_, b)| map.points[b].position).collect();
    let depth = map.median_depth(kf)?;
    let est = horn_similarity_ransac(&p, &q, cfg.sim_tol_frac * depth, 1000, seed).ok()?;
    if est.inliers.len() <= cfg.min_inliers {
        log::debug!("loop rejected: {} similarity inliers", est.inliers.len());
        return None;
    }
    Some((est.similarity, est.inliers.iter().map(|&i| pairs[i]).collect()))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MergeReport {
    pub corrected_keyframes: Vec<KeyframeId>,
    pub moved_points: usize,
    pub merged_points: usize,
}

/// Corrects the keyframes around `kf` by `t_sim`, fuses duplicated points
/// with the loop side and runs global bundle adjustment.
#[allow(clippy::too_many_arguments)]
pub fn merge_loop(
    map: &mut SlamMap,
    kf: KeyframeId,
    loop_kf: KeyframeId,
    t_sim: &Similarity,
    inlier_pairs: &[(PointId, PointId)],
    intrinsics: &CameraIntrinsics,
    cfg: &LoopConfig,
    ba: &BaConfig,
) -> MergeReport {
    let mut side: BTreeSet<KeyframeId> = map.covisible(kf).into_iter().collect();
    side.insert(kf);
    let mut loop_side: BTreeSet<KeyframeId> = map.covisible(loop_kf).into_iter().collect();
    loop_side.insert(loop_kf);
    side.retain(|k| !loop_side.contains(k));

    for &k in &side {
        let kf_ref = &mut map.keyframes[k];
        kf_ref.pose = t_sim.apply_pose(&kf_ref.pose);
    }
    let mut moved = 0;
    let ids: Vec<PointId> = map.points.keys().copied().collect();
    for id in &ids {
        let p = map.points.get_mut(id).expect("point exists");
        if !p.observations.is_empty() && p.observations.keys().all(|k| side.contains(k)) {
            p.position = t_sim.apply(&p.position);
            moved += 1;
        }
    }

    // Project loop-side points into the corrected keyframes.
    let loop_points: BTreeSet<PointId> = loop_side.iter().flat_map(|k| map.keyframes[*k].observations.keys().copied()).collect();
    let mut merges: BTreeMap<PointId, PointId> = BTreeMap::new();
    for &(a, b) in inlier_pairs {
        merges.entry(a).or_insert(b);
    }
    for &k in &side {
        let pose = map.keyframes[k].pose;
        let obs: Vec<(PointId, crate::Vec2)> = map.keyframes[k]
            .observations
            .iter()
            .filter(|(p, _)| !loop_points.contains(p))
            .map(|(p, px)| (*p, *px))
            .collect();
        for &lp in &loop_points {
            let Some(proj) = crate::ba::project(&pose, &map.points[&lp].position, intrinsics) else { continue };
            let best = obs
                .iter()
                .map(|(p, px)| (*p, (px - proj).norm()))
                .filter(|(_, d)| *d <= cfg.merge_px)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((p, _)) = best {
                merges.entry(p).or_insert(lp);
            }
        }
    }
    let mut merged = 0;
    for (from, into) in merges {
        if map.points.contains_key(&from) && map.points.contains_key(&into) && from != into {
            map.merge_points(into, from);
            merged += 1;
        }
    }
    map.update_covisibility();
    crate::ba::global_ba(map, intrinsics, ba);
    MergeReport {
        corrected_keyframes: side.into_iter().collect(),
        moved_points: moved,
        merged_points: merged,
    }
}
