use nalgebra::{Matrix4, Quaternion, UnitQuaternion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ransac::{adaptive_iterations, draw};
use super::Similarity;
use crate::error::{Error, Result};
use crate::{Mat3, Vec3};

/// Closed-form similarity `q = s R p + t` by the unit-quaternion method.
pub fn horn_similarity(p: &[Vec3], q: &[Vec3]) -> Result<Similarity> {
    let n = p.len();
    if n != q.len() {
        return Err(Error::InvalidArgument("point sets differ in length".into()));
    }
    if n < 3 {
        return Err(Error::NotEnoughData { needed: 3, got: n });
    }
    let pc = p.iter().sum::<Vec3>() / n as f64;
    let qc = q.iter().sum::<Vec3>() / n as f64;
    let mut m = Mat3::zeros();
    let mut spread = Mat3::zeros();
    let mut pp = 0.0;
    for (a, b) in p.iter().zip(q) {
        let (da, db) = (a - pc, b - qc);
        m += da * db.transpose();
        spread += da * da.transpose();
        pp += da.norm_squared();
    }
    let ev = spread.symmetric_eigenvalues();
    let mut sorted = [ev[0], ev[1], ev[2]];
    sorted.sort_by(f64::total_cmp);
    if pp == 0.0 || sorted[1] <= 1e-12 * sorted[2] {
        return Err(Error::Degenerate("collinear point set".into()));
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = nmat.symmetric_eigen();
    let (imax, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("four eigenvalues");
    let v = eig.eigenvectors.column(imax);
    let rotation = UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]))
        .to_rotation_matrix()
        .into_inner();
    let mut num = 0.0;
    for (a, b) in p.iter().zip(q) {
        num += (b - qc).dot(&(rotation * (a - pc)));
    }
    let scale = num / pp;
    if !(scale > 0.0) {
        return Err(Error::Degenerate("non-positive scale".into()));
    }
    Ok(Similarity {
        scale,
        rotation,
        translation: qc - scale * (rotation * pc),
    })
}

#[derive(Clone, Debug)]
pub struct SimilarityEstimate {
    pub similarity: Similarity,
    pub inliers: Vec<usize>,
}

/// RANSAC over 3-point samples with `|T(p) - q| < tol`, refit on the inliers.
pub fn horn_similarity_ransac(p: &[Vec3], q: &[Vec3], tol: f64, max_iters: usize, seed: u64) -> Result<SimilarityEstimate> {
    let n = p.len();
    if n != q.len() {
        return Err(Error::InvalidArgument("point sets differ in length".into()));
    }
    if n < 3 {
        return Err(Error::NotEnoughData { needed: 3, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inliers_of = |s: &Similarity| -> Vec<usize> { (0..n).filter(|&i| (s.apply(&p[i]) - q[i]).norm() < tol).collect() };
    let mut best: Option<(Vec<usize>, Similarity)> = None;
    let mut iters = max_iters;
    let mut it = 0;
    while it < iters {
        it += 1;
        let sample = draw(&mut rng, n, 3);
        let sp: Vec<Vec3> = sample.iter().map(|&i| p[i]).collect();
        let sq: Vec<Vec3> = sample.iter().map(|&i| q[i]).collect();
        let Ok(s) = horn_similarity(&sp, &sq) else { continue };
        let inl = inliers_of(&s);
        if best.as_ref().is_none_or(|(b, _)| inl.len() > b.len()) {
            iters = iters.min(adaptive_iterations(inl.len() as f64 / n as f64, 3, 0.99, max_iters));
            best = Some((inl, s));
        }
    }
    let (mut inliers, mut similarity) = best.ok_or_else(|| Error::Degenerate("every sample was collinear".into()))?;
    for _ in 0..3 {
        if inliers.len() < 3 {
            break;
        }
        let ip: Vec<Vec3> = inliers.iter().map(|&i| p[i]).collect();
        let iq: Vec<Vec3> = inliers.iter().map(|&i| q[i]).collect();
        let Ok(s) = horn_similarity(&ip, &iq) else { break };
        let next = inliers_of(&s);
        if next.len() < inliers.len() {
            break;
        }
        similarity = s;
        if next == inliers {
            break;
        }
        inliers = next;
    }
    Ok(SimilarityEstimate { similarity, inliers })
}
