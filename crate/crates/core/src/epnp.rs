//! Perspective-n-point pose from 3D-2D correspondences: EPnP with a
//! RANSAC wrapper and Gauss-Newton refinement on the reprojection error.

use nalgebra::{DMatrix, Matrix3, Matrix6, SMatrix, SVector, SymmetricEigen, Vector2, Vector3, Vector4, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{skew, PinholeCamera, Pose, UnitQuatJPL};

/// Minimum number of correspondences accepted by the solvers.
pub const MIN_CORRESPONDENCES: usize = 6;
const REFINE_ITERS: usize = 10;
const BETA_GN_ITERS: usize = 5;

type Matrix12 = SMatrix<f64, 12, 12>;
type Vector12 = SVector<f64, 12>;

/// A solved camera pose `ᵂT_C` with its fit quality.
#[derive(Clone, Debug, PartialEq)]
pub struct PnpSolution {
    pub pose: Pose,
    /// Mean reprojection error over the inliers, pixels.
    pub mean_reproj_px: f64,
    /// Sum of squared inlier reprojection errors, pixels².
    pub sum_sq_px: f64,
    /// Gauss-Newton information `Σ JᵀJ` of the inliers for unit pixel
    /// variance, in the error coordinates of [`Pose::retract`].
    pub information: Matrix6<f64>,
    pub inliers: Vec<bool>,
}

impl PnpSolution {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }

    /// Pose covariance with the pixel variance estimated from the residuals,
    /// floored at `min_sigma_px²`.
    pub fn covariance(&self, min_sigma_px: f64) -> Option<Matrix6<f64>> {
        let dof = (2 * self.inlier_count()).saturating_sub(6).max(1) as f64;
        let var = (self.sum_sq_px / dof).max(min_sigma_px * min_sigma_px);
        self.information.try_inverse().map(|c| c * var)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { max_iterations: 64, threshold_px: 8.0, seed: 0 }
    }
}

fn reproj_error(pose: &Pose, cam: &PinholeCamera, p: &Vector3<f64>, z: &Vector2<f64>) -> f64 {
    match cam.project(&pose.inverse_transform_point(p)) {
        Some(h) => (z - h).norm(),
        None => f64::INFINITY,
    }
}

fn mean_error(pose: &Pose, cam: &PinholeCamera, pts: &[Vector3<f64>], px: &[Vector2<f64>]) -> f64 {
    pts.iter().zip(px).map(|(p, z)| reproj_error(pose, cam, p, z)).sum::<f64>() / pts.len() as f64
}

/// Rotation `R` and translation `t` with `p_c = R·p_w + t`, as a pose `ᵂT_C`.
fn pose_from_rt(r: &Matrix3<f64>, t: &Vector3<f64>) -> Pose {
    Pose::new(UnitQuatJPL::from_rot(r), -(r.transpose() * t))
}

/// Least-squares rigid alignment `p_c ≈ R·p_w + t`.
fn procrustes(pw: &[Vector3<f64>], pc: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = pw.len() as f64;
    let cw = pw.iter().sum::<Vector3<f64>>() / n;
    let cc = pc.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in pc.iter().zip(pw) {
        h += (a - cc) * (b - cw).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    (r, cc - r * cw)
}

struct ControlFrame {
    cw: [Vector3<f64>; 4],
    alphas: Vec<Vector4<f64>>,
}

fn control_frame(pts: &[Vector3<f64>]) -> Result<ControlFrame> {
    let n = pts.len() as f64;
    let c0 = pts.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in pts {
        cov += (p - c0) * (p - c0).transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(hi > 0.0) || lo < 1e-10 * hi {
        return Err(Error::Pnp("points are coplanar or collinear".into()));
    }
    let mut cw = [c0; 4];
    for j in 0..3 {
        cw[j + 1] = c0 + eig.eigenvalues[j].sqrt() * eig.eigenvectors.column(j);
    }
    let basis = Matrix3::from_columns(&[cw[1] - c0, cw[2] - c0, cw[3] - c0]);
    let inv = basis.try_inverse().ok_or_else(|| Error::Pnp("singular control frame".into()))?;
    let alphas = pts
        .iter()
        .map(|p| {
            let a = inv * (p - c0);
            Vector4::new(1.0 - a.sum(), a.x, a.y, a.z)
        })
        .collect();
    Ok(ControlFrame { cw, alphas })
}

const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

fn control_diff(v: &Vector12, (i, j): (usize, usize)) -> Vector3<f64> {
    v.fixed_rows::<3>(3 * i) - v.fixed_rows::<3>(3 * j)
}

/// Camera-frame control points from null-space coefficients.
fn camera_controls(kernel: &[Vector12; 4], betas: &Vector4<f64>) -> Vector12 {
    let mut out = Vector12::zeros();
    for k in 0..4 {
        out += betas[k] * kernel[k];
    }
    out
}

/// Gauss-Newton on the squared inter-control-point distances.
fn refine_betas(kernel: &[Vector12; 4], rho: &[f64; 6], mut betas: Vector4<f64>) -> Vector4<f64> {
    for _ in 0..BETA_GN_ITERS {
        let c = camera_controls(kernel, &betas);
        let mut jac = SMatrix::<f64, 6, 4>::zeros();
        let mut res = SVector::<f64, 6>::zeros();
        for (row, pair) in PAIRS.iter().enumerate() {
            let d = control_diff(&c, *pair);
            res[row] = rho[row] - d.norm_squared();
            for k in 0..4 {
                jac[(row, k)] = 2.0 * d.dot(&control_diff(&kernel[k], *pair));
            }
        }
        let jtj = jac.transpose() * jac;
        match jtj.try_inverse() {
            Some(inv) => betas += inv * jac.transpose() * res,
            None => break,
        }
    }
    betas
}

fn pose_from_controls(frame: &ControlFrame, cc: &Vector12, pts: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let mut pc: Vec<Vector3<f64>> =
        frame.alphas.iter().map(|a| (0..4).map(|j| a[j] * cc.fixed_rows::<3>(3 * j).into_owned()).sum()).collect();
    if pc.iter().filter(|p| p.z < 0.0).count() * 2 > pc.len() {
        for p in pc.iter_mut() {
            *p = -*p;
        }
    }
    procrustes(pts, &pc)
}

fn epnp_raw(pts: &[Vector3<f64>], px: &[Vector2<f64>], cam: &PinholeCamera) -> Result<Pose> {
    if pts.len() < MIN_CORRESPONDENCES || pts.len() != px.len() {
        return Err(Error::Pnp(format!("need at least {MIN_CORRESPONDENCES} correspondences, got {}", pts.len())));
    }
    let frame = control_frame(pts)?;
    let mut mtm = Matrix12::zeros();
    for (a, z) in frame.alphas.iter().zip(px) {
        let u = (z.x - cam.cx) / cam.fx;
        let v = (z.y - cam.cy) / cam.fy;
        let mut r1 = Vector12::zeros();
        let mut r2 = Vector12::zeros();
        for j in 0..4 {
            r1[3 * j] = a[j];
            r1[3 * j + 2] = -a[j] * u;
            r2[3 * j + 1] = a[j];
            r2[3 * j + 2] = -a[j] * v;
        }
        mtm += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let kernel: [Vector12; 4] = std::array::from_fn(|k| eig.eigenvectors.column(order[k]).into_owned());

    let mut rho = [0.0; 6];
    for (row, (i, j)) in PAIRS.iter().enumerate() {
        rho[row] = (frame.cw[*i] - frame.cw[*j]).norm_squared();
    }
    // Linearized distance constraints in the products β_aβ_b.
    let mut l = DMatrix::zeros(6, 10);
    for (row, pair) in PAIRS.iter().enumerate() {
        let d: [Vector3<f64>; 4] = std::array::from_fn(|k| control_diff(&kernel[k], *pair));
        let prods = [
            d[0].dot(&d[0]),
            2.0 * d[0].dot(&d[1]),
            d[1].dot(&d[1]),
            2.0 * d[0].dot(&d[2]),
            2.0 * d[1].dot(&d[2]),
            d[2].dot(&d[2]),
            2.0 * d[0].dot(&d[3]),
            2.0 * d[1].dot(&d[3]),
            2.0 * d[2].dot(&d[3]),
            d[3].dot(&d[3]),
        ];
        for (c, p) in prods.iter().enumerate() {
            l[(row, c)] = *p;
        }
    }
    let rho_v = nalgebra::DVector::from_column_slice(&rho);
    let solve = |cols: &[usize]| -> Option<nalgebra::DVector<f64>> {
        let sub = l.select_columns(cols);
        sub.svd(true, true).solve(&rho_v, 1e-12).ok()
    };

    let mut candidates = Vec::new();
    // One-dimensional kernel, β₁ from β₁₁, β₁₂, β₁₃, β₁₄.
    if let Some(b) = solve(&[0, 1, 3, 6]) {
        let b1 = b[0].abs().sqrt();
        if b1 > 0.0 {
            let s = b[0].signum();
            candidates.push(Vector4::new(b1, s * b[1] / b1, s * b[2] / b1, s * b[3] / b1));
        }
    }
    // Two-dimensional kernel.
    if let Some(b) = solve(&[0, 1, 2]) {
        let b1 = b[0].abs().sqrt();
        let b2 = b[2].abs().sqrt() * b[1].signum() * b[0].signum();
        candidates.push(Vector4::new(b1, b2, 0.0, 0.0));
    }
    // Three-dimensional kernel.
    if let Some(b) = solve(&[0, 1, 2, 3, 4]) {
        let b1 = b[0].abs().sqrt();
        let b2 = b[2].abs().sqrt() * b[1].signum() * b[0].signum();
        let b3 = if b1 > 0.0 { b[3] / b1 } else { 0.0 };
        candidates.push(Vector4::new(b1, b2, b3, 0.0));
    }

    let mut best: Option<(f64, Pose)> = None;
    for betas in candidates {
        let betas = refine_betas(&kernel, &rho, betas);
        if !betas.iter().all(|b| b.is_finite()) {
            continue;
        }
        let cc = camera_controls(&kernel, &betas);
        let (r, t) = pose_from_controls(&frame, &cc, pts);
        let pose = pose_from_rt(&r, &t);
        if !pose.is_finite() {
            continue;
        }
        let err = mean_error(&pose, cam, pts, px);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| Error::Pnp("no finite solution".into()))
}

/// `(Σ JᵀJ, Σ Jᵀr, Σ rᵀr)` of the reprojection residuals at `pose`.
fn normal_equations(
    pose: &Pose,
    pts: &[Vector3<f64>],
    px: &[Vector2<f64>],
    cam: &PinholeCamera,
) -> (Matrix6<f64>, Vector6<f64>, f64) {
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    let mut rr = 0.0;
    for (p, z) in pts.iter().zip(px) {
        let p_c = pose.inverse_transform_point(p);
        let Some(h) = cam.project(&p_c) else { continue };
        let jp = cam.project_jacobian(&p_c);
        let mut j = SMatrix::<f64, 2, 6>::zeros();
        j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * skew(&p_c)));
        j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-jp * pose.rot_mat()));
        jtj += j.transpose() * j;
        jtr += j.transpose() * (z - h);
        rr += (z - h).norm_squared();
    }
    (jtj, jtr, rr)
}

/// Gauss-Newton on the pixel reprojection error over the six pose
/// parameters.
pub fn refine_pose(pose: &Pose, pts: &[Vector3<f64>], px: &[Vector2<f64>], cam: &PinholeCamera) -> Pose {
    let mut cur = *pose;
    let mut cur_err = mean_error(&cur, cam, pts, px);
    for _ in 0..REFINE_ITERS {
        let (jtj, jtr, _) = normal_equations(&cur, pts, px, cam);
        let Some(step) = jtj.try_inverse().map(|inv| inv * jtr) else { break };
        let next = cur.retract(&step);
        let next_err = mean_error(&next, cam, pts, px);
        if !(next_err <= cur_err) {
            break;
        }
        let done = step.norm() < 1e-12;
        cur = next;
        cur_err = next_err;
        if done {
            break;
        }
    }
    cur
}

/// EPnP followed by reprojection refinement, using every correspondence.
///
/// `pts` are in the world frame `W`, `px` are pixels of a camera with
/// identity extrinsic. Returns `ᵂT_C`.
pub fn epnp_solve(pts: &[Vector3<f64>], px: &[Vector2<f64>], cam: &PinholeCamera) -> Result<PnpSolution> {
    let cam = cam.with_extrinsic(Pose::identity());
    let pose = refine_pose(&epnp_raw(pts, px, &cam)?, pts, px, &cam);
    let mean = mean_error(&pose, &cam, pts, px);
    if !mean.is_finite() {
        return Err(Error::Pnp("solution places points behind the camera".into()));
    }
    let (information, _, sum_sq_px) = normal_equations(&pose, pts, px, &cam);
    Ok(PnpSolution { pose, mean_reproj_px: mean, sum_sq_px, information, inliers: vec![true; pts.len()] })
}

/// RANSAC over minimal EPnP fits, then a refit on the consensus set.
pub fn epnp_ransac(
    pts: &[Vector3<f64>],
    px: &[Vector2<f64>],
    cam: &PinholeCamera,
    cfg: &RansacConfig,
) -> Result<PnpSolution> {
    let n = pts.len();
    if n < MIN_CORRESPONDENCES || n != px.len() {
        return Err(Error::Pnp(format!("need at least {MIN_CORRESPONDENCES} correspondences, got {n}")));
    }
    let cam = cam.with_extrinsic(Pose::identity());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Vec<bool>> = None;
    let mut best_count = 0;
    for _ in 0..cfg.max_iterations {
        let idx = sample(&mut rng, n, MIN_CORRESPONDENCES);
        let sp: Vec<Vector3<f64>> = idx.iter().map(|i| pts[i]).collect();
        let sz: Vec<Vector2<f64>> = idx.iter().map(|i| px[i]).collect();
        let Ok(pose) = epnp_raw(&sp, &sz, &cam) else { continue };
        let inl: Vec<bool> =
            pts.iter().zip(px).map(|(p, z)| reproj_error(&pose, &cam, p, z) < cfg.threshold_px).collect();
        let count = inl.iter().filter(|b| **b).count();
        if count > best_count {
            best_count = count;
            best = Some(inl);
            if count == n {
                break;
            }
        }
    }
    let inl = best.filter(|_| best_count >= MIN_CORRESPONDENCES).ok_or_else(|| Error::Pnp("no consensus".into()))?;
    let ip: Vec<Vector3<f64>> = pts.iter().zip(&inl).filter(|(_, b)| **b).map(|(p, _)| *p).collect();
    let iz: Vec<Vector2<f64>> = px.iter().zip(&inl).filter(|(_, b)| **b).map(|(z, _)| *z).collect();
    let mut sol = epnp_solve(&ip, &iz, &cam)?;
    sol.inliers = inl;
    Ok(sol)
}
