//! TUM-format sequence and trajectory I/O, calibration files and PLY export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{UnitQuaternion, Quaternion};

use crate::error::{Error, Result};
use crate::{Vec2, Vec3};

/// One grayscale input frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    pub index: usize,
    pub timestamp: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major 8-bit intensities.
    pub pixels: Vec<u8>,
}

impl ImageFrame {
    pub fn new(index: usize, timestamp: f64, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "frame {index}: {} pixels for {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Self {
            index,
            timestamp,
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Pinhole intrinsics with a single radial distortion coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, r: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() || !r.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bad intrinsics fx={fx} fy={fy} cx={cx} cy={cy} r={r}"
            )));
        }
        Ok(Self { fx, fy, cx, cy, r })
    }

    /// Checks the principal point against an image size.
    pub fn check_image(&self, width: usize, height: usize) -> Result<()> {
        if self.cx < 0.0 || self.cx >= width as f64 || self.cy < 0.0 || self.cy >= height as f64 {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside {width}x{height}",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Pixel to normalized image coordinate (distortion not removed).
    pub fn normalize(&self, px: &Vec2) -> Vec2 {
        Vec2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    pub fn denormalize(&self, n: &Vec2) -> Vec2 {
        Vec2::new(n.x * self.fx + self.cx, n.y * self.fy + self.cy)
    }

    /// Pixel to normalized coordinate with the radial factor removed by fixed-point iteration.
    pub fn undistort(&self, px: &Vec2) -> Vec2 {
        let d = self.normalize(px);
        if self.r == 0.0 {
            return d;
        }
        let mut u = d;
        for _ in 0..20 {
            u = d / (1.0 + self.r * u.norm_squared());
        }
        u
    }

    /// Mean focal length, used to convert pixel tolerances to normalized units.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Reads `fx fy cx cy r` from the first non-comment line of a file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: e.to_string(),
                })?;
            if vals.len() != 5 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: format!("expected 5 values (fx fy cx cy r), got {}", vals.len()),
                });
            }
            return CameraIntrinsics::new(vals[0], vals[1], vals[2], vals[3], vals[4]);
        }
        Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "no calibration line".into(),
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let text = format!(
            "# fx fy cx cy r\n{} {} {} {} {}\n",
            self.fx, self.fy, self.cx, self.cy, self.r
        );
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A timestamped pose in TUM convention: camera position and orientation in the world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub timestamp: f64,
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

/// One line of a TUM `rgb.txt` style index.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub timestamp: f64,
    pub path: PathBuf,
}

/// Parses an image index file (`timestamp path` lines, `#` comments).
pub fn read_index(index: &Path) -> Result<Vec<IndexEntry>> {
    let text = fs::read_to_string(index).map_err(|e| Error::io(index, e))?;
    let mut entries = Vec::new();
    let mut previous: Option<f64> = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(ts), Some(rel)) = (it.next(), it.next()) else {
            return Err(Error::Parse {
                path: index.to_path_buf(),
                line: n + 1,
                message: "expected `timestamp path`".into(),
            });
        };
        let timestamp: f64 = ts.parse().map_err(|_| Error::Parse {
            path: index.to_path_buf(),
            line: n + 1,
            message: format!("bad timestamp {ts:?}"),
        })?;
        if let Some(p) = previous {
            if timestamp <= p {
                return Err(Error::NonMonotonic {
                    line: n + 1,
                    previous: p,
                    current: timestamp,
                });
            }
        }
        previous = Some(timestamp);
        entries.push(IndexEntry {
            timestamp,
            path: PathBuf::from(rel),
        });
    }
    Ok(entries)
}

/// Loads one image as 8-bit gray. Color input is converted with BT.601 luma.
pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0;
            let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok((w as usize, h as usize, pixels))
}

/// Locates the index file inside a sequence directory.
pub fn find_index(dir: &Path) -> Result<PathBuf> {
    for name in ["rgb.txt", "images.txt"] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join("rgb.txt"),
        std::io::Error::new(std::io::ErrorKind::NotFound, "missing index file"),
    ))
}

/// Loads every frame listed in the sequence's index, in timestamp order.
pub fn load_tum_sequence(dir: &Path) -> Result<Vec<ImageFrame>> {
    let index = find_index(dir)?;
    read_index(&index)?
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let (w, h, px) = load_gray(&dir.join(&e.path))?;
            ImageFrame::new(i, e.timestamp, w, h, px)
        })
        .collect()
}

/// Reads a TUM trajectory / ground-truth file (`t tx ty tz qx qy qz qw`).
pub fn load_groundtruth(file: &Path) -> Result<Vec<TrajectoryRecord>> {
    let text = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: file.to_path_buf(),
            line: n + 1,
            message,
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number {t:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 8 {
            return Err(err(format!("expected 8 fields, got {}", vals.len())));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        let norm = q.norm();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(err("zero-norm quaternion".into()));
        }
        records.push(TrajectoryRecord {
            timestamp: vals[0],
            position: Vec3::new(vals[1], vals[2], vals[3]),
            orientation: UnitQuaternion::from_quaternion(q),
        });
    }
    records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(records)
}

pub fn write_trajectory_tum(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for r in records {
        let q = r.orientation.quaternion();
        writeln!(
            out,
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            r.timestamp, r.position.x, r.position.y, r.position.z, q.i, q.j, q.k, q.w
        )
        .expect("write to string");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes an ASCII PLY. Returns the number of skipped non-finite points.
pub fn write_pointcloud_ply(points: &[Vec3], path: &Path) -> Result<usize> {
    let finite: Vec<&Vec3> = points.iter().filter(|p| p.iter().all(|v| v.is_finite())).collect();
    let skipped = points.len() - finite.len();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", finite.len()).expect("write to string");
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in finite {
        writeln!(out, "{} {} {}", p.x, p.y, p.z).expect("write to string");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} non-finite points", path.display());
    }
    Ok(skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn index_line_parses_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "rgb.txt",
            "# color images\n1305031102.175 rgb/1305031102.175.png\n",
        );
        let e = read_index(&p).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].timestamp, 1305031102.175);
        assert_eq!(e[0].path, PathBuf::from("rgb/1305031102.175.png"));
    }

    #[test]
    fn empty_index_is_empty_sequence() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "rgb.txt", "");
        assert!(load_tum_sequence(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn equal_timestamps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "rgb.txt", "1.0 a.png\n1.0 b.png\n");
        let err = read_index(&p).unwrap_err();
        assert!(err.to_string().contains("non-monotonic timestamps"), "{err}");
    }

    #[test]
    fn missing_index_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_tum_sequence(dir.path()).is_err());
    }

    #[test]
    fn color_image_converted_by_luma() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = image::RgbImage::new(2, 1);
        img.put_pixel(0, 0, image::Rgb([255, 0, 0]));
        img.put_pixel(1, 0, image::Rgb([0, 0, 255]));
        img.save(dir.path().join("a.png")).unwrap();
        write(dir.path(), "rgb.txt", "0.5 a.png\n");
        let frames = load_tum_sequence(dir.path()).unwrap();
        assert_eq!(frames[0].pixels, vec![76, 29]);
        assert_eq!(frames[0].index, 0);
    }

    #[test]
    fn groundtruth_comment_and_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "gt.txt", "# comment\n0.0 1 2 3 0 0 0 1\n");
        let r = load_groundtruth(&p).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].position, Vec3::new(1.0, 2.0, 3.0));
        assert!(r[0].orientation.angle() < 1e-15);
    }

    #[test]
    fn groundtruth_zero_quaternion_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "gt.txt", "0.0 1 2 3 0 0 0 0\n");
        assert!(load_groundtruth(&p).is_err());
        let p = write(dir.path(), "gt2.txt", "0.0 1 2 3\n1 2\n");
        match load_groundtruth(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn groundtruth_normalizes_quaternion() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "gt.txt", "0.0 0 0 0 0 0 0 2\n");
        let r = load_groundtruth(&p).unwrap();
        assert!((r[0].orientation.quaternion().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_trajectory_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        write_trajectory_tum(&[], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with('#'));
    }

    #[test]
    fn one_record_has_eight_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        let rec = TrajectoryRecord {
            timestamp: 1.5,
            position: Vec3::new(1.0, 2.0, 3.0),
            orientation: UnitQuaternion::identity(),
        };
        write_trajectory_tum(&[rec], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].split_whitespace().count(), 8);
    }

    #[test]
    fn trajectory_round_trip_random() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut t = 0.0;
        let records: Vec<TrajectoryRecord> = (0..100)
            .map(|_| {
                t += rng.random_range(0.01..1.0);
                TrajectoryRecord {
                    timestamp: t,
                    position: Vec3::new(
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-10.0..10.0),
                        rng.random_range(-10.0..10.0),
                    ),
                    orientation: UnitQuaternion::from_euler_angles(
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-3.0..3.0),
                    ),
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        write_trajectory_tum(&records, &p).unwrap();
        let back = load_groundtruth(&p).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            assert!((a.timestamp - b.timestamp).abs() < 1e-6);
            assert!((a.position - b.position).amax() < 1e-6);
            let (qa, qb) = (a.orientation.quaternion(), b.orientation.quaternion());
            assert!((qa.coords - qb.coords).amax() < 1e-6);
        }
    }

    #[test]
    fn ply_counts_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        assert_eq!(write_pointcloud_ply(&[], &p).unwrap(), 0);
        assert!(fs::read_to_string(&p).unwrap().contains("element vertex 0"));
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)];
        write_pointcloud_ply(&pts, &p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("element vertex 3"));
        let bad = vec![Vec3::new(f64::NAN, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0)];
        assert_eq!(write_pointcloud_ply(&bad, &p).unwrap(), 1);
        assert!(fs::read_to_string(&p).unwrap().contains("element vertex 1"));
    }

    #[test]
    fn calibration_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "calib.txt", "# fx fy cx cy r\n525 525 319.5 239.5 0\n");
        let k = CameraIntrinsics::from_file(&p).unwrap();
        assert_eq!(k.fx, 525.0);
        assert_eq!(k.cy, 239.5);
        let p = write(dir.path(), "bad.txt", "525 525 319.5\n");
        assert!(CameraIntrinsics::from_file(&p).is_err());
    }
}
