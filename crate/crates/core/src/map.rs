//! Keyframes, map points and their covisibility.

use std::collections::{BTreeMap, BTreeSet};

use crate::dataset::{CameraIntrinsics, ImageFrame};
use crate::edges::{EdgeChain, EdgeMask};
use crate::flow::TrackId;
use crate::geometry::Pose;
use crate::loop_closure::{MomentSignature, QuadrantDescriptor};
use crate::{Vec2, Vec3};

pub type KeyframeId = usize;
pub type PointId = usize;

/// Keyframes sharing more than this many map points are covisible.
pub const COVISIBILITY_MIN_SHARED: usize = 100;

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub frame_index: usize,
    pub timestamp: f64,
    pub pose: Pose,
    pub chains: Vec<EdgeChain>,
    pub mask: EdgeMask,
    pub image: ImageFrame,
    /// Live tracks on this keyframe (pixels).
    pub tracks: BTreeMap<TrackId, Vec2>,
    /// Map points observed here (pixels).
    pub observations: BTreeMap<PointId, Vec2>,
    pub signature: Option<MomentSignature>,
    pub quadrants: Option<QuadrantDescriptor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapPoint {
    pub id: PointId,
    pub position: Vec3,
    pub observations: BTreeMap<KeyframeId, Vec2>,
    pub inlier: bool,
}

#[derive(Clone, Debug, Default)]
pub struct SlamMap {
    pub keyframes: Vec<Keyframe>,
    pub points: BTreeMap<PointId, MapPoint>,
    next_point: PointId,
    /// Pairs `(a, b)` with `a < b` and their shared point count, for pairs above the threshold.
    pub covisibility: BTreeMap<(KeyframeId, KeyframeId), usize>,
    pub keyframes_since_global: usize,
    pub last_global_time: f64,
    /// Which map point a track has been triangulated into.
    pub track_points: BTreeMap<TrackId, PointId>,
}

impl SlamMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn add_keyframe(&mut self, mut kf: Keyframe) -> KeyframeId {
        kf.id = self.keyframes.len();
        let id = kf.id;
        self.keyframes.push(kf);
        id
    }

    pub fn add_point(&mut self, position: Vec3) -> PointId {
        let id = self.next_point;
        self.next_point += 1;
        self.points.insert(
            id,
            MapPoint {
                id,
                position,
                observations: BTreeMap::new(),
                inlier: true,
            },
        );
        id
    }

    pub fn add_observation(&mut self, kf: KeyframeId, point: PointId, pixel: Vec2) {
        if let Some(p) = self.points.get_mut(&point) {
            p.observations.insert(kf, pixel);
            self.keyframes[kf].observations.insert(point, pixel);
        }
    }

    pub fn remove_observation(&mut self, kf: KeyframeId, point: PointId) {
        if let Some(p) = self.points.get_mut(&point) {
            p.observations.remove(&kf);
        }
        self.keyframes[kf].observations.remove(&point);
    }

    pub fn remove_point(&mut self, point: PointId) {
        if let Some(p) = self.points.remove(&point) {
            for kf in p.observations.keys() {
                self.keyframes[*kf].observations.remove(&point);
            }
        }
        self.track_points.retain(|_, v| *v != point);
    }

    /// Removes the newest keyframe, its observations and any point left
    /// with fewer than two observers.
    pub fn pop_keyframe(&mut self) -> Option<Keyframe> {
        let kf = self.keyframes.pop()?;
        for p in kf.observations.keys() {
            let weak = match self.points.get_mut(p) {
                Some(mp) => {
                    mp.observations.remove(&kf.id);
                    mp.observations.len() < 2
                }
                None => false,
            };
            if weak {
                self.remove_point(*p);
            }
        }
        self.update_covisibility();
        Some(kf)
    }

    /// Drops points seen by fewer than two keyframes.
    pub fn prune_points(&mut self) -> usize {
        let weak: Vec<PointId> = self.points.values().filter(|p| p.observations.len() < 2).map(|p| p.id).collect();
        for id in &weak {
            self.remove_point(*id);
        }
        weak.len()
    }

    /// Moves every observation of `from` onto `into` and deletes `from`.
    /// A keyframe observing both keeps the observation of `into`.
    pub fn merge_points(&mut self, into: PointId, from: PointId) {
        if into == from || !self.points.contains_key(&into) {
            return;
        }
        let Some(src) = self.points.remove(&from) else { return };
        for (kf, px) in src.observations {
            self.keyframes[kf].observations.remove(&from);
            let target = self.points.get_mut(&into).expect("target exists");
            if let std::collections::btree_map::Entry::Vacant(e) = target.observations.entry(kf) {
                e.insert(px);
                self.keyframes[kf].observations.insert(into, px);
            }
        }
        for v in self.track_points.values_mut() {
            if *v == from {
                *v = into;
            }
        }
    }

    /// Shared map-point counts for every keyframe pair that shares any.
    pub fn shared_counts(&self) -> BTreeMap<(KeyframeId, KeyframeId), usize> {
        let mut counts = BTreeMap::new();
        for p in self.points.values() {
            let kfs: Vec<KeyframeId> = p.observations.keys().copied().collect();
            for i in 0..kfs.len() {
                for j in i + 1..kfs.len() {
                    *counts.entry((kfs[i], kfs[j])).or_insert(0) += 1;
                }
            }
        }
        counts
    }

    pub fn update_covisibility(&mut self) {
        self.covisibility = self
            .shared_counts()
            .into_iter()
            .filter(|(_, n)| *n > COVISIBILITY_MIN_SHARED)
            .collect();
    }

    /// Keyframes covisible with `kf`, ascending.
    pub fn covisible(&self, kf: KeyframeId) -> Vec<KeyframeId> {
        let mut out: BTreeSet<KeyframeId> = BTreeSet::new();
        for &(a, b) in self.covisibility.keys() {
            if a == kf {
                out.insert(b);
            } else if b == kf {
                out.insert(a);
            }
        }
        out.into_iter().collect()
    }

    /// Keyframes sharing at least one map point with `kf`.
    pub fn neighbours(&self, kf: KeyframeId) -> BTreeSet<KeyframeId> {
        let mut out = BTreeSet::new();
        for p in self.keyframes[kf].observations.keys() {
            if let Some(mp) = self.points.get(p) {
                out.extend(mp.observations.keys().copied().filter(|k| *k != kf));
            }
        }
        out
    }

    /// Largest reprojection error over all observations, pixels.
    pub fn max_reprojection_error(&self, k: &CameraIntrinsics) -> f64 {
        let mut worst = 0.0f64;
        for p in self.points.values() {
            for (kf, px) in &p.observations {
                let e = crate::ba::project(&self.keyframes[*kf].pose, &p.position, k).map_or(f64::INFINITY, |q| (q - px).norm());
                worst = worst.max(e);
            }
        }
        worst
    }

    /// Median depth of the points observed by `kf`.
    pub fn median_depth(&self, kf: KeyframeId) -> Option<f64> {
        let pose = &self.keyframes[kf].pose;
        let depths: Vec<f64> = self.keyframes[kf]
            .observations
            .keys()
            .filter_map(|p| self.points.get(p))
            .map(|p| pose.transform(&p.position).z)
            .collect();
        if depths.is_empty() {
            return None;
        }
        Some(crate::edges::median(&depths))
    }
}
