//! Absolute trajectory error against ground truth.

use nalgebra::Rotation3;
use serde::Serialize;

use crate::dataset::TrajectoryRecord;
use crate::edges::median;
use crate::error::{Error, Result};
use crate::geometry::{horn_similarity, unit, Similarity};
use crate::{Mat3, Vec3};

pub const DEFAULT_MAX_DT: f64 = 0.02;

/// Greedy nearest-timestamp association: candidate pairs closer than
/// `max_dt` are taken in order of increasing time difference, each record
/// used at most once. Pairs are returned in estimated-timestamp order.
pub fn associate(estimated: &[TrajectoryRecord], groundtruth: &[TrajectoryRecord], max_dt: f64) -> Result<Vec<(TrajectoryRecord, TrajectoryRecord)>> {
    let mut gt_order: Vec<usize> = (0..groundtruth.len()).collect();
    gt_order.sort_by(|a, b| groundtruth[*a].timestamp.total_cmp(&groundtruth[*b].timestamp));
    let times: Vec<f64> = gt_order.iter().map(|&j| groundtruth[j].timestamp).collect();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, e) in estimated.iter().enumerate() {
        let lo = times.partition_point(|t| *t < e.timestamp - max_dt);
        for (k, t) in times.iter().enumerate().skip(lo) {
            if *t > e.timestamp + max_dt {
                break;
            }
            let dt = (t - e.timestamp).abs();
            if dt <= max_dt {
                candidates.push((dt, i, gt_order[k]));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = vec![false; estimated.len()];
    let mut used_g = vec![false; groundtruth.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_e[i] && !used_g[j] {
            used_e[i] = true;
            used_g[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!("no timestamps associated within {max_dt} s")));
    }
    pairs.sort();
    Ok(pairs.into_iter().map(|(i, j)| (estimated[i], groundtruth[j])).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AteReport {
    pub rmse_cm: f64,
    pub mean_cm: f64,
    pub median_cm: f64,
    pub max_cm: f64,
    pub pairs: usize,
    #[serde(serialize_with = "serialize_similarity")]
    pub alignment: Similarity,
    /// Set when the positions were collinear and the span-ratio alignment was used.
    pub degenerate_alignment: bool,
}

fn serialize_similarity<S: serde::Serializer>(s: &Similarity, ser: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeStruct;
    let r = &s.rotation;
    let rows: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]));
    let mut st = ser.serialize_struct("Similarity", 3)?;
    st.serialize_field("scale", &s.scale)?;
    st.serialize_field("rotation", &rows)?;
    st.serialize_field("translation", &[s.translation.x, s.translation.y, s.translation.z])?;
    st.end()
}

/// Centroid, unit principal direction and largest distance from the centroid.
fn principal_axis(p: &[Vec3]) -> (Vec3, Vec3, f64) {
    let c = p.iter().sum::<Vec3>() / p.len() as f64;
    let mut cov = Mat3::zeros();
    for x in p {
        cov += (x - c) * (x - c).transpose();
    }
    let eig = cov.symmetric_eigen();
    let (imax, _) = eig.eigenvalues.argmax();
    let span = p.iter().map(|x| (x - c).norm()).fold(0.0, f64::max);
    (c, eig.eigenvectors.column(imax).into_owned(), span)
}

/// Rigid alignment of the principal axes with scale from the span ratio.
fn span_alignment(est: &[Vec3], gt: &[Vec3]) -> Similarity {
    let (ce, de, se) = principal_axis(est);
    let (cg, dg, sg) = principal_axis(gt);
    let sign = est.iter().zip(gt).map(|(e, g)| (e - ce).dot(&de) * (g - cg).dot(&dg)).sum::<f64>().signum();
    let de = if sign < 0.0 { -de } else { de };
    let rotation = Rotation3::rotation_between(&de, &dg)
        .unwrap_or_else(|| Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(unit(de.cross(&Vec3::x()) + de.cross(&Vec3::y()))), std::f64::consts::PI))
        .into_inner();
    let scale = if se > 0.0 { sg / se } else { 1.0 };
    Similarity {
        scale,
        rotation,
        translation: cg - scale * (rotation * ce),
    }
}

/// ATE after similarity alignment of the estimated positions onto the
/// ground truth. Positions are in metres, errors reported in centimetres.
pub fn ate_rmse(pairs: &[(TrajectoryRecord, TrajectoryRecord)]) -> Result<AteReport> {
    if pairs.len() < 3 {
        return Err(Error::NotEnoughData { needed: 3, got: pairs.len() });
    }
    let est: Vec<Vec3> = pairs.iter().map(|p| p.0.position).collect();
    let gt: Vec<Vec3> = pairs.iter().map(|p| p.1.position).collect();
    let (alignment, degenerate_alignment) = match horn_similarity(&est, &gt) {
        Ok(s) => (s, false),
        Err(Error::Degenerate(_)) => (span_alignment(&est, &gt), true),
        Err(e) => return Err(e),
    };
    let errors: Vec<f64> = est.iter().zip(&gt).map(|(e, g)| (alignment.apply(e) - g).norm() * 100.0).collect();
    let n = errors.len() as f64;
    Ok(AteReport {
        rmse_cm: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean_cm: errors.iter().sum::<f64>() / n,
        median_cm: median(&errors),
        max_cm: errors.iter().copied().fold(0.0, f64::max),
        pairs: errors.len(),
        alignment,
        degenerate_alignment,
    })
}
