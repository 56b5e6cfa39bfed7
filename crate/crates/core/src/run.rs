//! Batch runs: pipeline over a sequence, artifacts, exit codes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Config;
use crate::dataset::{find_index, load_groundtruth, load_gray, read_index, write_pointcloud_ply, write_trajectory_tum, CameraIntrinsics, ImageFrame, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::eval::{associate, ate_rmse, AteReport, DEFAULT_MAX_DT};
use crate::frontend::{Frontend, ImageFrontend};
use crate::pipeline::{Pipeline, PipelineStatus, PipelineTimings, QualityReport, RunSummary};
use crate::Vec3;

pub const EXIT_OK: i32 = 0;
/// Bad arguments, unreadable input or an internal error.
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INIT_FAILED: i32 = 2;
pub const EXIT_TRACKING_LOST: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    InitFailed,
    TrackingLost,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Completed => EXIT_OK,
            RunStatus::InitFailed => EXIT_INIT_FAILED,
            RunStatus::TrackingLost => EXIT_TRACKING_LOST,
        }
    }
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub status: RunStatus,
    pub last_frame: Option<usize>,
    pub frames: usize,
    pub skipped_frames: usize,
    pub keyframes: usize,
    pub map_points: usize,
    pub recoveries: usize,
    pub loops_closed: usize,
    pub ate_rmse_cm: Option<f64>,
    pub ate: Option<AteReport>,
    pub init_frames: Option<(usize, usize)>,
    pub init_quality: Option<QualityReport>,
    pub timings_ms: PipelineTimings,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub summary: RunSummary,
    pub trajectory: Vec<TrajectoryRecord>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        self.report.status.exit_code()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub sequence: PathBuf,
    pub calib: PathBuf,
    pub out: PathBuf,
    pub groundtruth: Option<PathBuf>,
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
}

impl RunOptions {
    pub fn load_config(&self) -> Result<Config> {
        let mut config = match &self.config {
            Some(p) => Config::from_file(p)?,
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            config.ransac.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Frames of a TUM-style sequence, decoded one at a time.
pub fn sequence_frames(dir: &Path) -> Result<impl Iterator<Item = Result<ImageFrame>>> {
    let entries = read_index(&find_index(dir)?)?;
    let dir = dir.to_path_buf();
    Ok(entries.into_iter().enumerate().map(move |(i, e)| {
        let (w, h, px) = load_gray(&dir.join(&e.path))?;
        ImageFrame::new(i, e.timestamp, w, h, px)
    }))
}

fn image_frontend(opts: &RunOptions, config: &Config) -> Result<ImageFrontend> {
    let intrinsics = CameraIntrinsics::from_file(&opts.calib)?;
    Ok(ImageFrontend::new(sequence_frames(&opts.sequence)?, intrinsics, config))
}

fn status_of(summary: &RunSummary, status: PipelineStatus) -> RunStatus {
    match status {
        PipelineStatus::Lost { .. } => RunStatus::TrackingLost,
        PipelineStatus::Initializing => RunStatus::InitFailed,
        PipelineStatus::Tracking if summary.initialized => RunStatus::Completed,
        PipelineStatus::Tracking => RunStatus::InitFailed,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Per-keyframe positions, plus the aligned estimate and matched ground
/// truth when an ATE alignment is available.
fn plot_csv(trajectory: &[TrajectoryRecord], frames: &[usize], ate: Option<(&AteReport, &[(TrajectoryRecord, TrajectoryRecord)])>) -> String {
    let mut out = String::from("keyframe,frame_index,timestamp,x,y,z");
    if ate.is_some() {
        out.push_str(",aligned_x,aligned_y,aligned_z,gt_x,gt_y,gt_z");
    }
    out.push('\n');
    for (i, r) in trajectory.iter().enumerate() {
        let p = r.position;
        write!(out, "{i},{},{:.6},{:.9},{:.9},{:.9}", frames[i], r.timestamp, p.x, p.y, p.z).expect("write to string");
        if let Some((report, pairs)) = ate {
            match pairs.iter().find(|(e, _)| e.timestamp == r.timestamp) {
                Some((_, g)) => {
                    let a = report.alignment.apply(&p);
                    let g = g.position;
                    write!(out, ",{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}", a.x, a.y, a.z, g.x, g.y, g.z).expect("write to string");
                }
                None => out.push_str(",,,,,,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Runs `frontend` to the end and writes `trajectory.txt`, `map.ply`,
/// `report.json` and `plotdata.csv` into `out`.
pub fn run_with_frontend<F: Frontend>(frontend: F, config: Config, out: &Path, groundtruth: Option<&[TrajectoryRecord]>) -> Result<RunOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut pipeline = Pipeline::new(frontend, config)?;
    let summary = pipeline.run()?;
    let status = status_of(&summary, pipeline.status());
    let trajectory = pipeline.trajectory();
    let frames: Vec<usize> = pipeline.map().keyframes.iter().map(|k| k.frame_index).collect();
    let points: Vec<Vec3> = pipeline.map().points.values().map(|p| p.position).collect();

    let pairs = match groundtruth {
        Some(gt) if trajectory.len() >= 3 => associate(&trajectory, gt, DEFAULT_MAX_DT).ok(),
        _ => None,
    };
    let ate = match &pairs {
        Some(p) => ate_rmse(p).ok(),
        None => None,
    };
    if groundtruth.is_some() && ate.is_none() {
        log::warn!("no ATE: fewer than three keyframes matched the ground truth");
    }

    write_trajectory_tum(&trajectory, &out.join("trajectory.txt"))?;
    write_pointcloud_ply(&points, &out.join("map.ply"))?;
    let plot = plot_csv(&trajectory, &frames, ate.as_ref().zip(pairs.as_deref()));
    let plot_path = out.join("plotdata.csv");
    fs::write(&plot_path, plot).map_err(|e| Error::io(&plot_path, e))?;

    let report = RunReport {
        status,
        last_frame: summary.last_frame,
        frames: summary.frames,
        skipped_frames: summary.skipped_frames,
        keyframes: summary.keyframes,
        map_points: points.len(),
        recoveries: summary.recoveries,
        loops_closed: summary.loops_closed,
        ate_rmse_cm: ate.map(|a| a.rmse_cm),
        ate,
        init_frames: summary.init_frames,
        init_quality: summary.init_quality,
        timings_ms: summary.timings,
    };
    write_json(&out.join("report.json"), &report)?;
    match status {
        RunStatus::Completed => log::info!("finished at frame {:?} with {} keyframes", summary.last_frame, summary.keyframes),
        RunStatus::InitFailed => log::error!("initialization never succeeded (last frame {:?})", summary.last_frame),
        RunStatus::TrackingLost => log::error!("tracking lost at frame {:?}", summary.lost_at),
    }
    Ok(RunOutcome { report, summary, trajectory })
}

/// The `run` verb on an image sequence.
pub fn run_sequence(opts: &RunOptions) -> Result<RunOutcome> {
    let config = opts.load_config()?;
    let gt = opts.groundtruth.as_deref().map(load_groundtruth).transpose()?;
    run_with_frontend(image_frontend(opts, &config)?, config, &opts.out, gt.as_deref())
}

/// Contents of `init.json` written by the init-only verb.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InitReport {
    pub initialized: bool,
    pub last_frame: Option<usize>,
    pub init_frames: Option<(usize, usize)>,
    /// Quality of the accepted pair, or of the last rejected attempt.
    pub quality: Option<QualityReport>,
    pub map_points: usize,
}

impl InitReport {
    pub fn exit_code(&self) -> i32 {
        if self.initialized {
            EXIT_OK
        } else {
            EXIT_INIT_FAILED
        }
    }
}

/// Stops after the two-view initialization; writes `init.json` into `out`.
pub fn init_only_with_frontend<F: Frontend>(frontend: F, config: Config, out: &Path) -> Result<InitReport> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut pipeline = Pipeline::new(frontend, config)?;
    let summary = pipeline.run_init_only()?;
    let report = InitReport {
        initialized: summary.initialized,
        last_frame: summary.last_frame,
        init_frames: summary.init_frames,
        quality: summary.init_quality,
        map_points: pipeline.map().points.len(),
    };
    write_json(&out.join("init.json"), &report)?;
    Ok(report)
}

pub fn init_only_sequence(opts: &RunOptions) -> Result<InitReport> {
    let config = opts.load_config()?;
    init_only_with_frontend(image_frontend(opts, &config)?, config, &opts.out)
}

/// The `eval` verb: ATE of a TUM trajectory file against ground truth.
pub fn evaluate_files(estimated: &Path, groundtruth: &Path) -> Result<AteReport> {
    let est = load_groundtruth(estimated)?;
    let gt = load_groundtruth(groundtruth)?;
    ate_rmse(&associate(&est, &gt, DEFAULT_MAX_DT)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{SyntheticConfig, SyntheticFrontend, SyntheticSequence};

    #[test]
    fn status_mapping() {
        let mut s = RunSummary::default();
        assert_eq!(status_of(&s, PipelineStatus::Initializing), RunStatus::InitFailed);
        assert_eq!(status_of(&s, PipelineStatus::Lost { frame_index: 4 }), RunStatus::TrackingLost);
        s.initialized = true;
        assert_eq!(status_of(&s, PipelineStatus::Tracking), RunStatus::Completed);
        assert_ne!(EXIT_INIT_FAILED, EXIT_TRACKING_LOST);
    }

    #[test]
    fn short_synthetic_run_writes_artifacts() {
        let cfg = SyntheticConfig {
            frames: 40,
            ..SyntheticConfig::default()
        };
        let seq = SyntheticSequence::circle(cfg);
        let gt = seq.groundtruth();
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_with_frontend(SyntheticFrontend::new(seq), Config::default(), dir.path(), Some(&gt)).unwrap();
        assert_eq!(outcome.exit_code(), EXIT_OK);
        let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        for key in ["ate_rmse_cm", "keyframes", "recoveries", "loops_closed"] {
            assert!(report.get(key).is_some(), "{key}");
        }
        for key in ["edge", "flow", "keyframe", "pose", "map", "local_ba"] {
            assert!(report["timings_ms"].get(key).is_some(), "{key}");
        }
        let plot = fs::read_to_string(dir.path().join("plotdata.csv")).unwrap();
        assert_eq!(plot.lines().count(), outcome.trajectory.len() + 1);
        assert!(plot.lines().skip(1).all(|l| l.split(',').count() == 12));
        let est = load_groundtruth(&dir.path().join("trajectory.txt")).unwrap();
        assert_eq!(est.len(), outcome.trajectory.len());
        let ate = evaluate_files(&dir.path().join("trajectory.txt"), &{
            let p = dir.path().join("gt.txt");
            write_trajectory_tum(&gt, &p).unwrap();
            p
        })
        .unwrap();
        assert!((ate.rmse_cm - outcome.report.ate_rmse_cm.unwrap()).abs() < 1e-3);
    }
}
