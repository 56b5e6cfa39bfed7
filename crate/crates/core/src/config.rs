//! Flat `key = value` configuration covering every tunable of the pipeline.
//!
//! Unknown keys are rejected so that typos do not silently fall back to defaults.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeConfig {
    pub sigma_small: f64,
    pub sigma_large: f64,
    /// Minimum gradient magnitude (gray levels per pixel) at a zero crossing.
    pub threshold: f64,
    pub min_chain_len: usize,
    /// Blur threshold as a fraction of the running median edge variance.
    pub blur_fraction: f64,
    /// Frames accepted unconditionally while the blur history is seeded.
    pub blur_bootstrap: usize,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            sigma_small: 1.0,
            sigma_large: 1.6,
            threshold: 6.0,
            min_chain_len: 8,
            blur_fraction: 0.5,
            blur_bootstrap: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub window: usize,
    pub levels: usize,
    pub max_iters: usize,
    pub eps: f64,
    pub bidir_tol: f64,
    pub min_dist: f64,
    pub snap_radius: usize,
    pub epiline_tol: f64,
    /// Spacing (in chain points) between newly spawned tracks.
    pub spawn_step: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            window: 21,
            levels: 3,
            max_iters: 30,
            eps: 0.01,
            bidir_tol: 1.0,
            min_dist: 2.0,
            snap_radius: 2,
            epiline_tol: 1.0,
            spawn_step: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacConfig {
    pub confidence: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Epipolar inlier threshold in pixels.
    pub essential_tol_px: f64,
    /// Reprojection inlier threshold for resection, in pixels.
    pub pnp_tol_px: f64,
    pub min_essential_inliers: usize,
    pub min_pnp_inliers: usize,
    pub min_parallax_deg: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            confidence: 0.99,
            max_iters: 1000,
            seed: 0,
            essential_tol_px: 1.5,
            pnp_tol_px: 3.0,
            min_essential_inliers: 50,
            min_pnp_inliers: 30,
            min_parallax_deg: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaConfig {
    pub max_iters_local: usize,
    pub max_iters_global: usize,
    pub huber_px: f64,
    pub outlier_px: f64,
    pub global_interval_kf: usize,
    pub global_interval_s: f64,
    /// Use the measurement-side distortion form instead of the standard one.
    pub literal_distortion: bool,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            max_iters_local: 50,
            max_iters_global: 100,
            huber_px: 2.0,
            outlier_px: 6.0,
            global_interval_kf: 25,
            global_interval_s: 25.0,
            literal_distortion: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeConfig {
    pub rot_deg: f64,
    pub track_frac: f64,
    pub min_3d2d: usize,
    pub disp_frac: f64,
    pub interval_s: f64,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self {
            rot_deg: 15.0,
            track_frac: 0.30,
            min_3d2d: 250,
            disp_frac: 0.20,
            interval_s: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub quality_ratio: f64,
    pub quality_count: usize,
    /// Fraction of a segment's tracked points that need a 3D estimate.
    pub coverage: f64,
    /// Allowed RMS distance to the fitted 3D line, as a fraction of median depth.
    pub collinear_frac: f64,
    pub min_correspondences: usize,
    pub segment_max_dev: f64,
    pub segment_min_len: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            quality_ratio: 0.6,
            quality_count: 20,
            coverage: 0.7,
            collinear_frac: 0.02,
            min_correspondences: 100,
            segment_max_dev: 1.0,
            segment_min_len: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopConfig {
    pub enabled: bool,
    pub quadrant_tol: f64,
    pub tau: f64,
    pub neighbor_deg: f64,
    pub neighbor_count: usize,
    pub min_inliers: usize,
    pub merge_px: f64,
    /// 3D inlier threshold for the similarity RANSAC, as a fraction of median point depth.
    pub sim_tol_frac: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            quadrant_tol: 0.25,
            tau: 1.0,
            neighbor_deg: 30.0,
            neighbor_count: 5,
            min_inliers: 100,
            merge_px: 2.0,
            sim_tol_frac: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub edges: EdgeConfig,
    pub flow: FlowConfig,
    pub ransac: RansacConfig,
    pub ba: BaConfig,
    pub keyframe: KeyframeConfig,
    pub init: InitConfig,
    pub recovery_min_inliers: usize,
    pub loop_closure: LoopConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            edges: EdgeConfig::default(),
            flow: FlowConfig::default(),
            ransac: RansacConfig::default(),
            ba: BaConfig::default(),
            keyframe: KeyframeConfig::default(),
            init: InitConfig::default(),
            recovery_min_inliers: 100,
            loop_closure: LoopConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: "expected key=value".into(),
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Sets one configuration key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dog.sigma_small" => self.edges.sigma_small = parse(key, value)?,
            "dog.sigma_large" => self.edges.sigma_large = parse(key, value)?,
            "dog.threshold" => self.edges.threshold = parse(key, value)?,
            "edges.min_chain_len" => self.edges.min_chain_len = parse(key, value)?,
            "blur.fraction" => self.edges.blur_fraction = parse(key, value)?,
            "blur.bootstrap" => self.edges.blur_bootstrap = parse(key, value)?,
            "flow.window" => self.flow.window = parse(key, value)?,
            "flow.levels" => self.flow.levels = parse(key, value)?,
            "flow.max_iters" => self.flow.max_iters = parse(key, value)?,
            "flow.eps" => self.flow.eps = parse(key, value)?,
            "flow.bidir_tol" => self.flow.bidir_tol = parse(key, value)?,
            "flow.min_dist" => self.flow.min_dist = parse(key, value)?,
            "flow.snap_radius" => self.flow.snap_radius = parse(key, value)?,
            "flow.epiline_tol" => self.flow.epiline_tol = parse(key, value)?,
            "flow.spawn_step" => self.flow.spawn_step = parse(key, value)?,
            "ransac.confidence" => self.ransac.confidence = parse(key, value)?,
            "ransac.max_iters" => self.ransac.max_iters = parse(key, value)?,
            "ransac.seed" => self.ransac.seed = parse(key, value)?,
            "ransac.essential_tol_px" => self.ransac.essential_tol_px = parse(key, value)?,
            "ransac.pnp_tol_px" => self.ransac.pnp_tol_px = parse(key, value)?,
            "ransac.min_essential_inliers" => {
                self.ransac.min_essential_inliers = parse(key, value)?
            }
            "ransac.min_pnp_inliers" => self.ransac.min_pnp_inliers = parse(key, value)?,
            "tri.min_parallax_deg" => self.ransac.min_parallax_deg = parse(key, value)?,
            "ba.max_iters" => self.ba.max_iters_local = parse(key, value)?,
            "ba.max_iters_global" => self.ba.max_iters_global = parse(key, value)?,
            "ba.huber_px" => self.ba.huber_px = parse(key, value)?,
            "ba.outlier_px" => self.ba.outlier_px = parse(key, value)?,
            "ba.global_interval_kf" => self.ba.global_interval_kf = parse(key, value)?,
            "ba.global_interval_s" => self.ba.global_interval_s = parse(key, value)?,
            "ba.literal_distortion" => self.ba.literal_distortion = parse(key, value)?,
            "kf.rot_deg" => self.keyframe.rot_deg = parse(key, value)?,
            "kf.track_frac" => self.keyframe.track_frac = parse(key, value)?,
            "kf.min_3d2d" => self.keyframe.min_3d2d = parse(key, value)?,
            "kf.disp_frac" => self.keyframe.disp_frac = parse(key, value)?,
            "kf.interval_s" => self.keyframe.interval_s = parse(key, value)?,
            "init.quality_ratio" => self.init.quality_ratio = parse(key, value)?,
            "init.quality_count" => self.init.quality_count = parse(key, value)?,
            "init.coverage" => self.init.coverage = parse(key, value)?,
            "init.collinear_frac" => self.init.collinear_frac = parse(key, value)?,
            "init.min_correspondences" => self.init.min_correspondences = parse(key, value)?,
            "init.segment_max_dev" => self.init.segment_max_dev = parse(key, value)?,
            "init.segment_min_len" => self.init.segment_min_len = parse(key, value)?,
            "recovery.min_inliers" => self.recovery_min_inliers = parse(key, value)?,
            "loop.enabled" => self.loop_closure.enabled = parse(key, value)?,
            "loop.quadrant_tol" => self.loop_closure.quadrant_tol = parse(key, value)?,
            "loop.tau" => self.loop_closure.tau = parse(key, value)?,
            "loop.neighbor_deg" => self.loop_closure.neighbor_deg = parse(key, value)?,
            "loop.neighbor_count" => self.loop_closure.neighbor_count = parse(key, value)?,
            "loop.min_inliers" => self.loop_closure.min_inliers = parse(key, value)?,
            "loop.merge_px" => self.loop_closure.merge_px = parse(key, value)?,
            "loop.sim_tol_frac" => self.loop_closure.sim_tol_frac = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.edges;
        if !(e.sigma_small > 0.0 && e.sigma_large > e.sigma_small) {
            return Err(Error::Config("need dog.sigma_large > dog.sigma_small > 0".into()));
        }
        let f = &self.flow;
        if f.window < 3 || f.window.is_multiple_of(2) {
            return Err(Error::Config("flow.window must be odd and >= 3".into()));
        }
        if f.levels == 0 {
            return Err(Error::Config("flow.levels must be >= 1".into()));
        }
        if !(self.ransac.confidence > 0.0 && self.ransac.confidence < 1.0) {
            return Err(Error::Config("ransac.confidence must lie in (0,1)".into()));
        }
        if self.ba.huber_px <= 0.0 || self.ba.outlier_px <= 0.0 {
            return Err(Error::Config("ba thresholds must be positive".into()));
        }
        Ok(())
    }
}
