//! Five-point relative pose: polynomial solver, cheirality decomposition and
//! a RANSAC wrapper with a Sampson-error refinement on the inliers.

use nalgebra::{DMatrix, SMatrix, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ransac::{adaptive_iterations, draw};
use super::triangulation::triangulate_dlt;
use super::{exp_so3, unit, Pose, RelativePose};
use crate::error::{Error, Result};
use crate::{Mat3, Vec2, Vec3};

/// Dense polynomial in x, y, z of total degree <= 3, indexed `[a][b][c]` for `x^a y^b z^c`.
#[derive(Clone, Copy)]
struct Poly3([[[f64; 4]; 4]; 4]);

impl Poly3 {
    fn zero() -> Self {
        Poly3([[[0.0; 4]; 4]; 4])
    }

    fn linear(cx: f64, cy: f64, cz: f64, c1: f64) -> Self {
        let mut p = Self::zero();
        p.0[1][0][0] = cx;
        p.0[0][1][0] = cy;
        p.0[0][0][1] = cz;
        p.0[0][0][0] = c1;
        p
    }

    fn add(&self, o: &Poly3) -> Poly3 {
        let mut r = *self;
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    r.0[a][b][c] += o.0[a][b][c];
                }
            }
        }
        r
    }

    fn scale(&self, s: f64) -> Poly3 {
        let mut r = *self;
        r.0.iter_mut().flatten().flatten().for_each(|v| *v *= s);
        r
    }

    fn mul(&self, o: &Poly3) -> Poly3 {
        let mut r = Self::zero();
        for a in 0..4 {
            for b in 0..4 - a {
                for c in 0..4 - a - b {
                    let v = self.0[a][b][c];
                    if v == 0.0 {
                        continue;
                    }
                    for d in 0..4 - a - b - c {
                        for e in 0..4 - a - b - c - d {
                            for f in 0..4 - a - b - c - d - e {
                                r.0[a + d][b + e][c + f] += v * o.0[d][e][f];
                            }
                        }
                    }
                }
            }
        }
        r
    }

    /// Value and gradient at `(x, y, z)`.
    fn eval_grad(&self, x: f64, y: f64, z: f64) -> (f64, Vector3<f64>) {
        let pw = |v: f64, n: usize| if n == 0 { 1.0 } else { v.powi(n as i32) };
        let mut val = 0.0;
        let mut g = Vector3::zeros();
        for a in 0..4 {
            for b in 0..4 - a {
                for c in 0..4 - a - b {
                    let k = self.0[a][b][c];
                    if k == 0.0 {
                        continue;
                    }
                    val += k * pw(x, a) * pw(y, b) * pw(z, c);
                    if a > 0 {
                        g.x += k * a as f64 * pw(x, a - 1) * pw(y, b) * pw(z, c);
                    }
                    if b > 0 {
                        g.y += k * b as f64 * pw(x, a) * pw(y, b - 1) * pw(z, c);
                    }
                    if c > 0 {
                        g.z += k * c as f64 * pw(x, a) * pw(y, b) * pw(z, c - 1);
                    }
                }
            }
        }
        (val, g)
    }
}

/// Gauss-Newton on the ten cubic constraints, starting from an eliminated
/// root. Keeps the start when no iterate lowers the residual.
fn polish_root(eqs: &[Poly3], start: Vector3<f64>) -> Vector3<f64> {
    let residual = |v: &Vector3<f64>| eqs.iter().map(|p| p.eval_grad(v.x, v.y, v.z).0.powi(2)).sum::<f64>();
    let mut best = start;
    let mut best_r = residual(&start);
    let mut v = start;
    for _ in 0..5 {
        let mut jtj = Mat3::zeros();
        let mut jtr = Vector3::zeros();
        for p in eqs {
            let (f, g) = p.eval_grad(v.x, v.y, v.z);
            jtj += g * g.transpose();
            jtr += g * f;
        }
        let Some(step) = jtj.lu().solve(&jtr) else { break };
        v -= step;
        let r = residual(&v);
        if !(r < best_r) {
            break;
        }
        best = v;
        best_r = r;
    }
    best
}

/// Column order of the 10x20 constraint matrix: the first ten monomials are
/// eliminated, the remaining ten span the quotient.
const MONOMIALS: [(usize, usize, usize); 20] = [
    (3, 0, 0),
    (0, 3, 0),
    (2, 1, 0),
    (1, 2, 0),
    (2, 0, 1),
    (2, 0, 0),
    (0, 2, 1),
    (0, 2, 0),
    (1, 1, 1),
    (1, 1, 0),
    (1, 0, 2),
    (1, 0, 1),
    (1, 0, 0),
    (0, 1, 2),
    (0, 1, 1),
    (0, 1, 0),
    (0, 0, 3),
    (0, 0, 2),
    (0, 0, 1),
    (0, 0, 0),
];

/// Univariate polynomial, ascending powers.
#[derive(Clone, Debug)]
struct UPoly(Vec<f64>);

impl UPoly {
    fn mul(&self, o: &UPoly) -> UPoly {
        let mut r = vec![0.0; self.0.len() + o.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in o.0.iter().enumerate() {
                r[i + j] += a * b;
            }
        }
        UPoly(r)
    }

    fn add(&self, o: &UPoly) -> UPoly {
        let n = self.0.len().max(o.0.len());
        UPoly((0..n).map(|i| self.0.get(i).unwrap_or(&0.0) + o.0.get(i).unwrap_or(&0.0)).collect())
    }

    fn neg(&self) -> UPoly {
        UPoly(self.0.iter().map(|v| -v).collect())
    }

    fn eval(&self, z: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * z + c)
    }

    fn derivative(&self) -> UPoly {
        if self.0.len() <= 1 {
            return UPoly(vec![0.0]);
        }
        UPoly(self.0.iter().enumerate().skip(1).map(|(i, c)| i as f64 * c).collect())
    }

    /// Real roots from the eigenvalues of the companion matrix, polished by Newton steps.
    fn real_roots(&self) -> Vec<f64> {
        let scale = self.0.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        if scale == 0.0 {
            return Vec::new();
        }
        let mut coeffs = self.0.clone();
        while coeffs.len() > 1 && coeffs.last().is_some_and(|c| c.abs() <= 1e-14 * scale) {
            coeffs.pop();
        }
        let deg = coeffs.len() - 1;
        if deg == 0 {
            return Vec::new();
        }
        let lead = coeffs[deg];
        let mut comp = DMatrix::<f64>::zeros(deg, deg);
        for i in 1..deg {
            comp[(i, i - 1)] = 1.0;
        }
        for i in 0..deg {
            comp[(i, deg - 1)] = -coeffs[i] / lead;
        }
        let poly = UPoly(coeffs);
        let dpoly = poly.derivative();
        let eig = comp.complex_eigenvalues();
        let mut roots = Vec::new();
        for ev in eig.iter() {
            if ev.im.abs() > 1e-6 * (1.0 + ev.re.abs()) {
                continue;
            }
            let mut z = ev.re;
            for _ in 0..5 {
                let d = dpoly.eval(z);
                if d == 0.0 {
                    break;
                }
                let step = poly.eval(z) / d;
                if !step.is_finite() {
                    break;
                }
                z -= step;
            }
            roots.push(z);
        }
        roots
    }
}

fn epipolar_row(a: &Vec2, b: &Vec2) -> [f64; 9] {
    // coefficients of E_ij in b^T E a
    let (xa, ya) = (a.x, a.y);
    let (xb, yb) = (b.x, b.y);
    [xb * xa, xb * ya, xb, yb * xa, yb * ya, yb, xa, ya, 1.0]
}

fn mat_from_vec(v: &[f64]) -> Mat3 {
    Mat3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
}

/// Essential matrices consistent with five normalized correspondences
/// (`b^T E a = 0`). Returns up to ten candidates.
pub fn solve_five_point(a: &[Vec2], b: &[Vec2]) -> Vec<Mat3> {
    assert_eq!(a.len(), 5);
    assert_eq!(b.len(), 5);
    let mut q = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..5 {
        let row = epipolar_row(&a[i], &b[i]);
        for (j, v) in row.iter().enumerate() {
            q[(i, j)] = *v;
        }
    }
    let svd = q.svd(false, true);
    let Some(vt) = svd.v_t else {
        return Vec::new();
    };
    let basis: Vec<Mat3> = (5..9)
        .map(|r| mat_from_vec(vt.row(r).iter().copied().collect::<Vec<_>>().as_slice()))
        .collect();

    // E = x E1 + y E2 + z E3 + E4 with linear entries
    let mut e = [[Poly3::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            e[i][j] = Poly3::linear(basis[0][(i, j)], basis[1][(i, j)], basis[2][(i, j)], basis[3][(i, j)]);
        }
    }
    let mut eqs: Vec<Poly3> = Vec::with_capacity(10);
    // det(E) = 0
    let det = e[0][0]
        .mul(&e[1][1].mul(&e[2][2]).add(&e[1][2].mul(&e[2][1]).scale(-1.0)))
        .add(&e[0][1].mul(&e[1][2].mul(&e[2][0]).add(&e[1][0].mul(&e[2][2]).scale(-1.0))))
        .add(&e[0][2].mul(&e[1][0].mul(&e[2][1]).add(&e[1][1].mul(&e[2][0]).scale(-1.0))));
    eqs.push(det);
    // 2 E E^T E - tr(E E^T) E = 0
    let mut eet = [[Poly3::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = Poly3::zero();
            for k in 0..3 {
                s = s.add(&e[i][k].mul(&e[j][k]));
            }
            eet[i][j] = s;
        }
    }
    let trace = eet[0][0].add(&eet[1][1]).add(&eet[2][2]);
    for i in 0..3 {
        for j in 0..3 {
            let mut s = Poly3::zero();
            for k in 0..3 {
                s = s.add(&eet[i][k].mul(&e[k][j]));
            }
            eqs.push(s.scale(2.0).add(&trace.mul(&e[i][j]).scale(-1.0)));
        }
    }

    let mut m = DMatrix::<f64>::zeros(10, 20);
    for (r, p) in eqs.iter().enumerate() {
        for (c, &(a, b, cc)) in MONOMIALS.iter().enumerate() {
            m[(r, c)] = p.0[a][b][cc];
        }
    }
    let lhs = m.view((0, 0), (10, 10)).into_owned();
    let rhs = m.view((0, 10), (10, 10)).into_owned();
    let Some(reduced) = lhs.lu().solve(&rhs) else {
        return Vec::new();
    };

    // Rows (4,5), (6,7), (8,9): row_p - z * row_q leaves polynomials in x, y, 1.
    let bx = |p: usize, q: usize, o: usize| {
        UPoly(vec![
            reduced[(p, o + 2)],
            reduced[(p, o + 1)] - reduced[(q, o + 2)],
            reduced[(p, o)] - reduced[(q, o + 1)],
            -reduced[(q, o)],
        ])
    };
    let b1 = |p: usize, q: usize| {
        UPoly(vec![
            reduced[(p, 9)],
            reduced[(p, 8)] - reduced[(q, 9)],
            reduced[(p, 7)] - reduced[(q, 8)],
            reduced[(p, 6)] - reduced[(q, 7)],
            -reduced[(q, 6)],
        ])
    };
    let rows: Vec<[UPoly; 3]> = [(4, 5), (6, 7), (8, 9)]
        .iter()
        .map(|&(p, q)| [bx(p, q, 0), bx(p, q, 3), b1(p, q)])
        .collect();
    let minor = |r1: usize, r2: usize, c1: usize, c2: usize| {
        rows[r1][c1].mul(&rows[r2][c2]).add(&rows[r1][c2].mul(&rows[r2][c1]).neg())
    };
    let det10 = rows[0][0]
        .mul(&minor(1, 2, 1, 2))
        .add(&rows[0][1].mul(&minor(1, 2, 0, 2)).neg())
        .add(&rows[0][2].mul(&minor(1, 2, 0, 1)));

    let mut out = Vec::new();
    for z in det10.real_roots() {
        let mz: Vec<Vector3<f64>> = rows
            .iter()
            .map(|r| Vector3::new(r[0].eval(z), r[1].eval(z), r[2].eval(z)))
            .collect();
        let candidates = [mz[0].cross(&mz[1]), mz[0].cross(&mz[2]), mz[1].cross(&mz[2])];
        let v = candidates
            .iter()
            .max_by(|p, q| p.norm().total_cmp(&q.norm()))
            .copied()
            .unwrap_or_else(Vector3::zeros);
        if v.z.abs() < 1e-14 * v.norm().max(1e-300) || v.norm() == 0.0 {
            continue;
        }
        let root = polish_root(&eqs, Vector3::new(v.x / v.z, v.y / v.z, z));
        let em = basis[0] * root.x + basis[1] * root.y + basis[2] * root.z + basis[3];
        let n = em.norm();
        if n > 0.0 && n.is_finite() {
            out.push(em / n);
        }
    }
    out
}

/// Sampson distance (normalized units) of a correspondence to `b^T E a = 0`.
pub(crate) fn sampson(e: &Mat3, a: &Vec2, b: &Vec2) -> f64 {
    let ha = Vec3::new(a.x, a.y, 1.0);
    let hb = Vec3::new(b.x, b.y, 1.0);
    let ea = e * ha;
    let etb = e.transpose() * hb;
    let num = hb.dot(&ea);
    let den = ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num.abs() / den.sqrt()
}

fn essential_from(r: &Mat3, t: &Vec3) -> Mat3 {
    super::skew(t) * r
}

fn tangent_basis(t: &Vec3) -> (Vec3, Vec3) {
    let helper = if t.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = unit(t.cross(&helper));
    let v = t.cross(&u);
    (u, v)
}

/// Project onto the essential manifold: singular values (1, 1, 0).
fn project_essential(e: &Mat3) -> Mat3 {
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0)) * vt
}

/// Counts points in front of both cameras for a candidate `(R, t)`.
fn cheirality_count(r: &Mat3, t: &Vec3, a: &[Vec2], b: &[Vec2], idx: &[usize]) -> usize {
    let p1 = Pose::identity();
    let p2 = Pose::from_rt(*r, *t);
    idx.iter()
        .filter(|&&i| {
            let x = triangulate_dlt(&[(p1, a[i]), (p2, b[i])]);
            x.is_some_and(|x| p1.transform(&x).z > 0.0 && p2.transform(&x).z > 0.0)
        })
        .count()
}

/// The four `(R, t)` factorizations of `E`, best cheirality first. Returns
/// the chosen relative pose and the number of points in front of both views.
pub fn decompose_essential(e: &Mat3, a: &[Vec2], b: &[Vec2], idx: &[usize]) -> (RelativePose, usize) {
    let svd = e.svd(true, true);
    let mut u = svd.u.expect("u");
    let mut vt = svd.v_t.expect("v_t");
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t = u.column(2).into_owned();
    let mut best = (
        RelativePose {
            rotation: r1,
            direction: t,
        },
        0usize,
    );
    let mut first = true;
    for r in [r1, r2] {
        for s in [1.0, -1.0] {
            let tt = t * s;
            let n = cheirality_count(&r, &tt, a, b, idx);
            if first || n > best.1 {
                best = (
                    RelativePose {
                        rotation: r,
                        direction: tt,
                    },
                    n,
                );
                first = false;
            }
        }
    }
    best
}

/// Gauss-Newton on the Sampson residuals over `idx`, parameterized by a
/// rotation increment and a tangent step of the unit translation.
fn refine_relative_pose(pose: &RelativePose, a: &[Vec2], b: &[Vec2], idx: &[usize]) -> RelativePose {
    if idx.len() < 6 {
        return *pose;
    }
    let residuals = |r: &Mat3, t: &Vec3| -> Vec<f64> {
        let e = essential_from(r, t);
        idx.iter()
            .map(|&i| {
                let ha = Vec3::new(a[i].x, a[i].y, 1.0);
                let hb = Vec3::new(b[i].x, b[i].y, 1.0);
                let ea = e * ha;
                let etb = e.transpose() * hb;
                let den = (ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y).sqrt();
                if den > 0.0 {
                    hb.dot(&ea) / den
                } else {
                    0.0
                }
            })
            .collect()
    };
    let apply = |r: &Mat3, t: &Vec3, d: &[f64; 5]| -> (Mat3, Vec3) {
        let (u, v) = tangent_basis(t);
        (exp_so3(&Vec3::new(d[0], d[1], d[2])) * r, unit(t + u * d[3] + v * d[4]))
    };
    let cost = |res: &[f64]| res.iter().map(|v| v * v).sum::<f64>();
    let (mut r, mut t) = (pose.rotation, pose.direction);
    let mut res = residuals(&r, &t);
    let mut c = cost(&res);
    let mut lambda = 1e-6;
    for _ in 0..30 {
        if c < 1e-30 {
            break;
        }
        let h = 1e-7;
        let n = idx.len();
        let mut jac = DMatrix::<f64>::zeros(n, 5);
        for k in 0..5 {
            let mut dp = [0.0; 5];
            dp[k] = h;
            let (rp, tp) = apply(&r, &t, &dp);
            dp[k] = -h;
            let (rm, tm) = apply(&r, &t, &dp);
            let (fp, fm) = (residuals(&rp, &tp), residuals(&rm, &tm));
            for i in 0..n {
                jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let rv = nalgebra::DVector::from_vec(res.clone());
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * rv;
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = jtj.clone();
            for k in 0..5 {
                damped[(k, k)] += lambda * (1.0 + jtj[(k, k)]);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-&jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let d = [step[0], step[1], step[2], step[3], step[4]];
            let (rn, tn) = apply(&r, &t, &d);
            let resn = residuals(&rn, &tn);
            let cn = cost(&resn);
            if cn < c {
                let rel = (c - cn) / c;
                r = rn;
                t = tn;
                res = resn;
                c = cn;
                lambda = (lambda * 0.1).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    RelativePose {
        rotation: super::orthonormalize(&r),
        direction: unit(t),
    }
}

#[derive(Clone, Debug)]
pub struct EssentialEstimate {
    /// Unit Frobenius norm, singular values (1, 1, 0) up to scale.
    pub essential: Mat3,
    pub inliers: Vec<usize>,
    pub pose: RelativePose,
}

#[derive(Clone, Copy, Debug)]
pub struct EssentialParams {
    pub max_iters: usize,
    pub confidence: f64,
    /// Sampson threshold in normalized image units (pixels / focal).
    pub tol: f64,
    pub seed: u64,
    pub min_inliers: usize,
}

impl Default for EssentialParams {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            confidence: 0.99,
            tol: 1.5 / 500.0,
            seed: 0,
            min_inliers: 50,
        }
    }
}

/// RANSAC over five-point samples with MSAC scoring, inlier refinement and
/// cheirality-based pose selection. Deterministic for a fixed seed.
pub fn five_point_ransac(a: &[Vec2], b: &[Vec2], params: &EssentialParams) -> Result<EssentialEstimate> {
    let n = a.len();
    if n != b.len() {
        return Err(Error::InvalidArgument("correspondence lists differ in length".into()));
    }
    if n < 5 {
        return Err(Error::NotEnoughData { needed: 5, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let tol2 = params.tol * params.tol;
    let mut best: Option<(f64, usize, Mat3)> = None;
    let mut iters = params.max_iters;
    let mut it = 0;
    while it < iters {
        it += 1;
        let sample = draw(&mut rng, n, 5);
        let sa: Vec<Vec2> = sample.iter().map(|&i| a[i]).collect();
        let sb: Vec<Vec2> = sample.iter().map(|&i| b[i]).collect();
        for e in solve_five_point(&sa, &sb) {
            let mut score = 0.0;
            let mut count = 0;
            for i in 0..n {
                let d = sampson(&e, &a[i], &b[i]);
                let d2 = d * d;
                if d2 < tol2 {
                    count += 1;
                    score += d2;
                } else {
                    score += tol2;
                }
            }
            if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
                best = Some((score, count, e));
                iters = iters.min(adaptive_iterations(count as f64 / n as f64, 5, params.confidence, params.max_iters));
            }
        }
    }
    let Some((_, _, e)) = best else {
        return Err(Error::EstimationFailed("five-point produced no hypothesis".into()));
    };
    let inliers_of = |e: &Mat3| -> Vec<usize> { (0..n).filter(|&i| sampson(e, &a[i], &b[i]) < params.tol).collect() };
    let mut inliers = inliers_of(&e);
    if inliers.len() < 5 {
        return Err(Error::EstimationFailed(format!("only {} inliers", inliers.len())));
    }
    let (pose, _) = decompose_essential(&e, a, b, &inliers);
    let mut pose = refine_relative_pose(&pose, a, b, &inliers);
    let mut essential = essential_from(&pose.rotation, &pose.direction);
    let refined_inliers = inliers_of(&essential);
    if refined_inliers.len() >= inliers.len() {
        inliers = refined_inliers;
    }
    // Re-check cheirality on the final inlier set; refinement keeps the branch.
    let (decomp, front) = decompose_essential(&essential, a, b, &inliers);
    if front > cheirality_count(&pose.rotation, &pose.direction, a, b, &inliers) {
        pose = decomp;
    }
    if inliers.len() < params.min_inliers {
        return Err(Error::EstimationFailed(format!(
            "{} essential inliers, need {}",
            inliers.len(),
            params.min_inliers
        )));
    }
    essential = project_essential(&essential_from(&pose.rotation, &pose.direction));
    essential /= essential.norm();
    Ok(EssentialEstimate {
        essential,
        inliers,
        pose,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{angle_between, rotation_angle};
    use rand::Rng;

    fn scene(rng: &mut ChaCha8Rng, n: usize, r: &Mat3, t: &Vec3) -> (Vec<Vec2>, Vec<Vec2>) {
        let p2 = Pose::from_rt(*r, *t);
        let mut a = Vec::new();
        let mut b = Vec::new();
        while a.len() < n {
            let x = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(3.0..8.0));
            if let Some(pb) = p2.project_normalized(&x) {
                a.push(Vec2::new(x.x / x.z, x.y / x.z));
                b.push(pb);
            }
        }
        (a, b)
    }

    #[test]
    fn minimal_solver_contains_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = exp_so3(&Vec3::new(0.1, -0.05, 0.2));
        let t = Vec3::new(0.3, 0.1, -0.1).normalize();
        let (a, b) = scene(&mut rng, 5, &r, &t);
        let truth = essential_from(&r, &t);
        let truth = truth / truth.norm();
        let sols = solve_five_point(&a, &b);
        assert!(!sols.is_empty());
        let best = sols
            .iter()
            .map(|e| (e - truth).norm().min((e + truth).norm()))
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-8, "closest candidate {best}");
    }

    #[test]
    fn pure_x_translation_essential_is_skew() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = scene(&mut rng, 40, &Mat3::identity(), &Vec3::x());
        let est = five_point_ransac(&a, &b, &EssentialParams { min_inliers: 5, ..Default::default() }).unwrap();
        let e = est.essential / est.essential[(1, 2)].abs();
        let s = -e[(1, 2)].signum();
        let expected = Mat3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert!((e * s - expected).amax() < 1e-8, "{e}");
        assert!(rotation_angle(&est.pose.rotation) < 1e-6);
        assert!(angle_between(&est.pose.direction, &Vec3::x()) < 1e-6);
    }

    #[test]
    fn exact_correspondences_recover_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = exp_so3(&Vec3::new(0.05, 0.2, -0.1));
        let t = Vec3::new(-0.5, 0.2, 0.1).normalize();
        let (a, b) = scene(&mut rng, 100, &r, &t);
        let est = five_point_ransac(&a, &b, &EssentialParams::default()).unwrap();
        assert_eq!(est.inliers.len(), 100);
        let rot_err = rotation_angle(&(est.pose.rotation * r.transpose())).to_radians();
        assert!(rot_err < 1e-6, "{rot_err}");
        assert!(angle_between(&est.pose.direction, &t) < 1e-6);
        for i in &est.inliers {
            let v = Vec3::new(b[*i].x, b[*i].y, 1.0).dot(&(est.essential * Vec3::new(a[*i].x, a[*i].y, 1.0)));
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn outliers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = exp_so3(&Vec3::new(0.0, 0.1, 0.05));
        let t = Vec3::new(1.0, 0.0, 0.2).normalize();
        let (mut a, mut b) = scene(&mut rng, 250, &r, &t);
        // 60% outliers: 150 of 250
        let outlier: Vec<bool> = (0..250).map(|i| i % 5 >= 2).collect();
        for i in 0..250 {
            if outlier[i] {
                b[i] = Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                a[i] = Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            }
        }
        let est = five_point_ransac(&a, &b, &EssentialParams { max_iters: 2000, ..Default::default() }).unwrap();
        let true_in = est.inliers.iter().filter(|&&i| !outlier[i]).count();
        assert!(true_in as f64 >= 0.95 * 100.0, "recovered {true_in}");
        assert!(rotation_angle(&(est.pose.rotation * r.transpose())) < 0.01);
    }

    #[test]
    fn deterministic_for_seed_and_needs_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = scene(&mut rng, 60, &exp_so3(&Vec3::new(0.1, 0.0, 0.0)), &Vec3::y());
        let p = EssentialParams::default();
        let e1 = five_point_ransac(&a, &b, &p).unwrap();
        let e2 = five_point_ransac(&a, &b, &p).unwrap();
        assert_eq!(e1.essential, e2.essential);
        assert_eq!(e1.inliers, e2.inliers);
        assert!(matches!(five_point_ransac(&a[..4], &b[..4], &p), Err(Error::NotEnoughData { .. })));
    }
}
