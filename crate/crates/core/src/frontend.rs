//! Per-frame correspondence generation feeding the pipeline.
//!
//! [`ImageFrontend`] runs edge extraction and edge-point tracking on real
//! images. Other sources (for example the projected synthetic scenes in
//! [`crate::synthetic`]) implement the same [`Frontend`] trait.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use crate::config::Config;
use crate::dataset::{CameraIntrinsics, ImageFrame};
use crate::edges::{blur_verdict, dog_edges_float, link_edges, thin_edges, BlurHistory, EdgeChain, EdgeMask};
use crate::error::Result;
use crate::flow::{bidirectional_filter, dedup_points, pyramidal_lk_pyr, snap_filter, three_view_filter, FlowParams, PointTrack, TrackId};
use crate::geometry::{essential_to_fundamental, five_point_ransac, EssentialParams};
use crate::image::{build_pyramid, FloatImage};
use crate::Vec2;

/// Everything the pipeline sees of one accepted frame.
#[derive(Clone, Debug)]
pub struct FrameObservation {
    pub frame_index: usize,
    pub timestamp: f64,
    pub width: usize,
    pub height: usize,
    /// Live tracks and their pixel positions, ordered by track id.
    pub points: Vec<(TrackId, Vec2)>,
    pub chains: Vec<EdgeChain>,
    pub mask: EdgeMask,
    pub image: ImageFrame,
}

/// Result of promoting the current frame to a keyframe.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyframeUpdate {
    /// Tracks removed by the three-keyframe consistency check.
    pub rejected: Vec<TrackId>,
    /// Tracks started on this keyframe.
    pub spawned: Vec<(TrackId, Vec2)>,
}

/// A keyframe as seen by [`Frontend::match_keyframes`].
#[derive(Clone, Copy, Debug)]
pub struct KeyframeView<'a> {
    pub image: &'a ImageFrame,
    pub points: &'a [(TrackId, Vec2)],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrontendTimings {
    pub edge_ms: f64,
    pub flow_ms: f64,
}

pub trait Frontend {
    fn intrinsics(&self) -> &CameraIntrinsics;

    /// The next accepted frame, or `None` at the end of the sequence.
    fn next_frame(&mut self) -> Option<Result<FrameObservation>>;

    /// Called when the frame last returned by `next_frame` becomes a keyframe.
    fn on_keyframe(&mut self) -> KeyframeUpdate;

    /// Point correspondences between two keyframes that are not linked by
    /// tracks, as pairs `(track in a, track in b)`.
    fn match_keyframes(&mut self, a: KeyframeView<'_>, b: KeyframeView<'_>) -> Vec<(TrackId, TrackId)>;

    fn timings(&self) -> FrontendTimings {
        FrontendTimings::default()
    }

    /// Frames dropped before reaching the pipeline (blur).
    fn skipped_frames(&self) -> usize {
        0
    }
}

/// Positions of the live tracks on one keyframe.
type Snapshot = BTreeMap<TrackId, Vec2>;

/// Edge detection plus bidirectional LK tracking over an image sequence.
pub struct ImageFrontend {
    frames: Box<dyn Iterator<Item = Result<ImageFrame>>>,
    intrinsics: CameraIntrinsics,
    config: Config,
    params: FlowParams,
    tracks: BTreeMap<TrackId, PointTrack>,
    next_id: TrackId,
    prev_pyramid: Option<Vec<FloatImage>>,
    current: Option<FrameObservation>,
    blur: BlurHistory,
    keyframes: Vec<Snapshot>,
    timings: FrontendTimings,
    skipped: usize,
}

impl ImageFrontend {
    pub fn new(frames: impl IntoIterator<Item = Result<ImageFrame>> + 'static, intrinsics: CameraIntrinsics, config: &Config) -> Self {
        Self {
            frames: Box::new(frames.into_iter()),
            intrinsics,
            config: config.clone(),
            params: FlowParams::from_config(&config.flow),
            tracks: BTreeMap::new(),
            next_id: 0,
            prev_pyramid: None,
            current: None,
            blur: BlurHistory::new(30),
            keyframes: Vec::new(),
            timings: FrontendTimings::default(),
            skipped: 0,
        }
    }

    pub fn from_frames(frames: Vec<ImageFrame>, intrinsics: CameraIntrinsics, config: &Config) -> Self {
        Self::new(frames.into_iter().map(Ok), intrinsics, config)
    }

    fn live_points(&self) -> Vec<(TrackId, Vec2)> {
        self.tracks.values().filter(|t| t.is_live()).map(|t| (t.track_id, t.last())).collect()
    }

    /// Forward/backward LK from the previous accepted frame, then the
    /// redundancy and edge-proximity filters. Dead tracks are dropped.
    fn track(&mut self, pyramid: &[FloatImage], frame_index: usize, mask: &EdgeMask) {
        let Some(prev) = self.prev_pyramid.as_ref() else { return };
        let ids: Vec<TrackId> = self.tracks.keys().copied().collect();
        let starts: Vec<Vec2> = ids.iter().map(|id| self.tracks[id].last()).collect();
        let forward = pyramidal_lk_pyr(prev, pyramid, &starts, &self.params);
        let ends: Vec<Vec2> = forward.iter().map(|r| r.position).collect();
        let backward = pyramidal_lk_pyr(pyramid, prev, &ends, &self.params);
        let survivors = bidirectional_filter(&starts, &forward, &backward, self.params.bidir_tol);
        // ids are allocated in increasing order, so id order is age order
        let positions: Vec<Vec2> = survivors.iter().map(|&i| ends[i]).collect();
        let unique: Vec<usize> = dedup_points(&positions, self.config.flow.min_dist).into_iter().map(|k| survivors[k]).collect();
        let unique_pos: Vec<Vec2> = unique.iter().map(|&i| ends[i]).collect();
        let on_edge: Vec<usize> = snap_filter(&unique_pos, mask, self.config.flow.snap_radius).into_iter().map(|k| unique[k]).collect();
        let mut keep = vec![false; ids.len()];
        for i in on_edge {
            keep[i] = true;
        }
        for (i, id) in ids.iter().enumerate() {
            let t = self.tracks.get_mut(id).expect("track exists");
            if keep[i] {
                t.extend(frame_index, ends[i]);
            } else {
                t.kill();
            }
        }
        self.tracks.retain(|_, t| t.is_live());
        for t in self.tracks.values_mut() {
            // only the latest position is needed for tracking
            while t.positions.len() > 1 {
                t.positions.pop_first();
            }
        }
    }

    /// Pixel coordinates with the radial factor removed.
    fn rectified(&self, p: &Vec2) -> Vec2 {
        self.intrinsics.denormalize(&self.intrinsics.undistort(p))
    }

    fn fundamental(&self, from: &Snapshot, to: &Snapshot) -> Option<crate::Mat3> {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (id, p) in from {
            if let Some(q) = to.get(id) {
                a.push(self.intrinsics.undistort(p));
                b.push(self.intrinsics.undistort(q));
            }
        }
        let params = EssentialParams {
            max_iters: self.config.ransac.max_iters,
            confidence: self.config.ransac.confidence,
            tol: self.config.ransac.essential_tol_px / self.intrinsics.focal(),
            seed: self.config.ransac.seed,
            min_inliers: 15,
        };
        let est = five_point_ransac(&a, &b, &params).ok()?;
        Some(essential_to_fundamental(&est.essential, &self.intrinsics))
    }

    fn three_view_rejects(&self) -> Vec<TrackId> {
        let n = self.keyframes.len();
        if n < 3 {
            return Vec::new();
        }
        let (ka, kb, kc) = (&self.keyframes[n - 3], &self.keyframes[n - 2], &self.keyframes[n - 1]);
        let (Some(fab), Some(fcb)) = (self.fundamental(ka, kb), self.fundamental(kc, kb)) else {
            log::debug!("three-view filter skipped: pairwise geometry unavailable");
            return Vec::new();
        };
        let ids: Vec<TrackId> = kc.keys().filter(|id| ka.contains_key(id) && kb.contains_key(id)).copied().collect();
        let pick = |s: &Snapshot| -> Vec<Vec2> { ids.iter().map(|id| self.rectified(&s[id])).collect() };
        let Some(keep) = three_view_filter(&pick(ka), &pick(kb), &pick(kc), &fab, &fcb, self.config.flow.epiline_tol) else {
            return Vec::new();
        };
        ids.iter().zip(keep).filter(|(_, k)| !k).map(|(id, _)| *id).collect()
    }
}

impl Frontend for ImageFrontend {
    fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    fn next_frame(&mut self) -> Option<Result<FrameObservation>> {
        loop {
            let frame = match self.frames.next()? {
                Ok(f) => f,
                Err(e) => return Some(Err(e)),
            };
            let t0 = Instant::now();
            let img = FloatImage::from_frame(&frame);
            let e = &self.config.edges;
            let mask = thin_edges(&dog_edges_float(&img, e.sigma_small, e.sigma_large, e.threshold));
            let verdict = blur_verdict(&frame, &mask, &self.blur.values(), e.blur_fraction, e.blur_bootstrap);
            if !verdict.sharp {
                self.timings.edge_ms += t0.elapsed().as_secs_f64() * 1e3;
                self.skipped += 1;
                log::debug!("frame {} rejected as blurred ({:.1} < {:.1})", frame.index, verdict.variance, verdict.threshold);
                continue;
            }
            self.blur.push(verdict.variance);
            let chains = link_edges(&mask, e.min_chain_len);
            self.timings.edge_ms += t0.elapsed().as_secs_f64() * 1e3;

            let t1 = Instant::now();
            let pyramid = build_pyramid(&img, self.params.pyramid_levels);
            self.track(&pyramid, frame.index, &mask);
            self.prev_pyramid = Some(pyramid);
            self.timings.flow_ms += t1.elapsed().as_secs_f64() * 1e3;

            let obs = FrameObservation {
                frame_index: frame.index,
                timestamp: frame.timestamp,
                width: frame.width,
                height: frame.height,
                points: self.live_points(),
                chains,
                mask,
                image: frame,
            };
            self.current = Some(obs.clone());
            return Some(Ok(obs));
        }
    }

    fn on_keyframe(&mut self) -> KeyframeUpdate {
        let Some(current) = self.current.take() else {
            return KeyframeUpdate::default();
        };
        let t0 = Instant::now();
        self.keyframes.push(self.live_points().into_iter().collect());
        if self.keyframes.len() > 3 {
            self.keyframes.remove(0);
        }
        let rejected = self.three_view_rejects();
        for id in &rejected {
            self.tracks.remove(id);
            if let Some(last) = self.keyframes.last_mut() {
                last.remove(id);
            }
        }
        // Spawn along chains where no live track is close.
        let live: Vec<Vec2> = self.live_points().into_iter().map(|(_, p)| p).collect();
        let min_dist = self.config.flow.min_dist;
        let cell = |p: &Vec2| ((p.x / min_dist.max(1.0)).floor() as i64, (p.y / min_dist.max(1.0)).floor() as i64);
        let mut grid: HashMap<(i64, i64), Vec<Vec2>> = HashMap::new();
        for p in live {
            grid.entry(cell(&p)).or_default().push(p);
        }
        let hw = (self.params.window / 2) as f64;
        let (w, h) = (current.width as f64, current.height as f64);
        let step = self.config.flow.spawn_step.max(1);
        let kf_index = self.keyframes.len();
        let mut spawned = Vec::new();
        for chain in &current.chains {
            for &(x, y) in chain.points.iter().step_by(step) {
                let p = Vec2::new(x as f64, y as f64);
                if p.x < hw || p.y < hw || p.x > w - 1.0 - hw || p.y > h - 1.0 - hw {
                    continue;
                }
                let (cx, cy) = cell(&p);
                let covered = (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| grid.get(&(cx + dx, cy + dy)).is_some_and(|v| v.iter().any(|q| (q - p).norm() < min_dist)))
                });
                if covered {
                    continue;
                }
                let id = self.next_id;
                self.next_id += 1;
                self.tracks.insert(id, PointTrack::new(id, current.frame_index, p, kf_index));
                grid.entry((cx, cy)).or_default().push(p);
                spawned.push((id, p));
            }
        }
        if let Some(last) = self.keyframes.last_mut() {
            last.extend(spawned.iter().copied());
        }
        self.timings.flow_ms += t0.elapsed().as_secs_f64() * 1e3;
        KeyframeUpdate { rejected, spawned }
    }

    fn match_keyframes(&mut self, a: KeyframeView<'_>, b: KeyframeView<'_>) -> Vec<(TrackId, TrackId)> {
        if a.image.width != b.image.width || a.image.height != b.image.height || a.points.is_empty() || b.points.is_empty() {
            return Vec::new();
        }
        let pa = build_pyramid(&FloatImage::from_frame(a.image), self.params.pyramid_levels);
        let pb = build_pyramid(&FloatImage::from_frame(b.image), self.params.pyramid_levels);
        let starts: Vec<Vec2> = a.points.iter().map(|(_, p)| *p).collect();
        let forward = pyramidal_lk_pyr(&pa, &pb, &starts, &self.params);
        let ends: Vec<Vec2> = forward.iter().map(|r| r.position).collect();
        let backward = pyramidal_lk_pyr(&pb, &pa, &ends, &self.params);
        let survivors = bidirectional_filter(&starts, &forward, &backward, self.params.bidir_tol);
        let radius = self.config.loop_closure.merge_px;
        let mut used = vec![false; b.points.len()];
        let mut out = Vec::new();
        for i in survivors {
            let best = b
                .points
                .iter()
                .enumerate()
                .filter(|(j, (_, q))| !used[*j] && (q - ends[i]).norm() <= radius)
                .min_by(|x, y| (x.1 .1 - ends[i]).norm().total_cmp(&(y.1 .1 - ends[i]).norm()));
            if let Some((j, (tb, _))) = best {
                used[j] = true;
                out.push((a.points[i].0, *tb));
            }
        }
        out
    }

    fn timings(&self) -> FrontendTimings {
        self.timings
    }

    fn skipped_frames(&self) -> usize {
        self.skipped
    }
}
