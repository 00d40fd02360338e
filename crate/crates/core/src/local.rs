//! Sliding-window feature constraints: triangulation, reprojection residuals
//! with analytic Jacobians, and landmark elimination by null-space
//! projection.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{skew, PinholeCamera, Pose};
use crate::state::{PoseClone, StateVector};
use crate::update::{nullspace_project, Measurement};

/// Largest accepted condition number of the triangulation normal matrix.
pub const MAX_TRIANGULATION_COND: f64 = 1e6;
pub const MIN_FEATURE_DEPTH: f64 = 0.1;
pub const MAX_FEATURE_DEPTH: f64 = 200.0;
const REFINE_STEPS: usize = 3;

/// Pixel observations of one feature, keyed by clone timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub id: u64,
    pub obs: Vec<(f64, Vector2<f64>)>,
}

impl FeatureTrack {
    pub fn new(id: u64) -> Self {
        Self { id, obs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

fn camera_pose(clone: &Pose, cam: &PinholeCamera) -> Pose {
    clone.compose(&cam.extrinsic)
}

fn observing_poses(track: &FeatureTrack, clones: &[PoseClone]) -> Result<Vec<(Pose, Vector2<f64>)>> {
    track
        .obs
        .iter()
        .map(|(t, z)| clones.iter().find(|c| c.t == *t).map(|c| (c.pose, *z)).ok_or(Error::UnknownClone(*t)))
        .collect()
}

/// Feature position in the odometry frame from its window observations.
///
/// Linear least squares on the ray constraints followed by Gauss-Newton on
/// the pixel reprojection error.
pub fn triangulate(track: &FeatureTrack, clones: &[PoseClone], cam: &PinholeCamera) -> Result<Vector3<f64>> {
    if track.len() < 2 {
        return Err(Error::Triangulation("fewer than two observations".into()));
    }
    let views: Vec<(Pose, Vector2<f64>)> =
        observing_poses(track, clones)?.into_iter().map(|(p, z)| (camera_pose(&p, cam), z)).collect();
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (pose, z) in &views {
        let d = (pose.rot_mat().transpose() * cam.unproject(z)).normalize();
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * pose.trans;
    }
    let eig = SymmetricEigen::new(a).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || hi / lo > MAX_TRIANGULATION_COND {
        return Err(Error::Triangulation(format!("ill-conditioned rays (eigenvalues {lo:e}, {hi:e})")));
    }
    let mut f = a.lu().solve(&b).ok_or_else(|| Error::Triangulation("singular normal matrix".into()))?;
    for _ in 0..REFINE_STEPS {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (pose, z) in &views {
            let p_c = pose.inverse_transform_point(&f);
            let Some(h) = cam.project(&p_c) else { break };
            let j = cam.project_jacobian(&p_c) * pose.rot_mat();
            jtj += j.transpose() * j;
            jtr += j.transpose() * (z - h);
        }
        match jtj.lu().solve(&jtr) {
            Some(step) if step.iter().all(|s| s.is_finite()) => f += step,
            _ => break,
        }
    }
    for (pose, _) in &views {
        let depth = pose.inverse_transform_point(&f).z;
        if !(MIN_FEATURE_DEPTH..=MAX_FEATURE_DEPTH).contains(&depth) {
            return Err(Error::Triangulation(format!("depth {depth:.3} m outside range")));
        }
    }
    Ok(f)
}

/// Stacked reprojection residual of one feature with Jacobians w.r.t. the
/// active error state and the feature position.
#[derive(Clone, Debug)]
pub struct LocalResidual {
    pub r: DVector<f64>,
    pub h_x: DMatrix<f64>,
    pub h_f: DMatrix<f64>,
}

/// Residual `z − h(x̂, f̂)` and the first-order Jacobians of `h` for every
/// observation of `track`.
pub fn local_residual_jacobian(
    track: &FeatureTrack,
    f: &Vector3<f64>,
    state: &StateVector,
    cam: &PinholeCamera,
) -> Result<LocalResidual> {
    let m = 2 * track.len();
    let mut r = DVector::zeros(m);
    let mut h_x = DMatrix::zeros(m, state.active_dim());
    let mut h_f = DMatrix::zeros(m, 3);
    let r_ci = cam.extrinsic.rot_mat();
    for (k, (t, z)) in track.obs.iter().enumerate() {
        let slot = state.clone_slot(*t).ok_or(Error::UnknownClone(*t))?;
        let clone = &state.clones()[slot].pose;
        let p_i = clone.inverse_transform_point(f);
        let p_c = cam.extrinsic.inverse_transform_point(&p_i);
        let h = cam.project(&p_c).ok_or(Error::BehindCamera)?;
        let r_il = clone.rot_mat();
        let j = cam.project_jacobian(&p_c) * r_ci;
        let row = 2 * k;
        r.fixed_rows_mut::<2>(row).copy_from(&(z - h));
        let col = state.clone_offset(slot);
        h_x.fixed_view_mut::<2, 3>(row, col).copy_from(&(j * skew(&p_i)));
        h_x.fixed_view_mut::<2, 3>(row, col + 3).copy_from(&(-j * r_il));
        h_f.fixed_view_mut::<2, 3>(row, 0).copy_from(&(j * r_il));
    }
    Ok(LocalResidual { r, h_x, h_f })
}

/// Full local constraint for one track: triangulate, linearize, eliminate
/// the feature. `None` when the track is unusable.
pub fn local_measurement(
    track: &FeatureTrack,
    state: &StateVector,
    cam: &PinholeCamera,
    sigma_px: f64,
) -> Option<Measurement> {
    let f = triangulate(track, state.clones(), cam).ok()?;
    let res = local_residual_jacobian(track, &f, state, cam).ok()?;
    let proj = nullspace_project(&res.r, &res.h_x, &res.h_f);
    if proj.r.is_empty() {
        return None;
    }
    Some(Measurement::active_only(proj.r, proj.h, sigma_px * sigma_px))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::UnitQuatJPL;
    use crate::imu::ImuState;
    use crate::imu::Matrix15;
    use crate::state::{augment_clone, BlockCovariance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> PinholeCamera {
        // Camera looks along body +x, image x right (−y body), image y down (−z body).
        let r_ic = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        PinholeCamera::new(400.0, 400.0, 320.0, 240.0, Pose::from_parent_rotation(&r_ic, Vector3::new(0.1, 0.0, 0.05)))
    }

    fn window(rng: &mut ChaCha8Rng, n: usize) -> (StateVector, Vec<Pose>) {
        let mut state = StateVector::new(ImuState::default(), 20);
        let mut cov = BlockCovariance::new_imu(&Matrix15::identity());
        let mut poses = Vec::new();
        for k in 0..n {
            let rv =
                Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.1..0.1));
            let pose = Pose::new(
                UnitQuatJPL::from_rotvec(&rv),
                Vector3::new(0.5 * k as f64, rng.random_range(-0.2..0.2), 0.0),
            );
            state.imu.q = pose.rot;
            state.imu.p = pose.trans;
            augment_clone(&mut state, &mut cov, k as f64).unwrap();
            poses.push(pose);
        }
        (state, poses)
    }

    fn observe(state: &StateVector, cam: &PinholeCamera, f: &Vector3<f64>) -> FeatureTrack {
        let mut track = FeatureTrack::new(0);
        for c in state.clones() {
            let p_c = cam.extrinsic.inverse_transform_point(&c.pose.inverse_transform_point(f));
            track.obs.push((c.t, cam.project(&p_c).unwrap()));
        }
        track
    }

    #[test]
    fn noiseless_triangulation_recovers_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let cam = camera();
        for _ in 0..50 {
            let (state, _) = window(&mut rng, 5);
            let f = Vector3::new(rng.random_range(6.0..30.0), rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0));
            let track = observe(&state, &cam, &f);
            let est = triangulate(&track, state.clones(), &cam).unwrap();
            assert!((est - f).norm() < 1e-6, "{est} vs {f}");
        }
    }

    #[test]
    fn degenerate_tracks_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let cam = camera();
        let (state, _) = window(&mut rng, 3);
        let f = Vector3::new(10.0, 0.0, 0.0);
        let mut track = observe(&state, &cam, &f);
        track.obs.truncate(1);
        assert!(triangulate(&track, state.clones(), &cam).is_err());

        let mut same = StateVector::new(ImuState::default(), 5);
        let mut cov = BlockCovariance::new_imu(&Matrix15::identity());
        for k in 0..3 {
            augment_clone(&mut same, &mut cov, k as f64).unwrap();
        }
        let track = observe(&same, &cam, &f);
        assert!(triangulate(&track, same.clones(), &cam).is_err());
    }

    #[test]
    fn residual_is_zero_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let cam = camera();
        let (state, _) = window(&mut rng, 4);
        let f = Vector3::new(12.0, 1.0, -0.5);
        let track = observe(&state, &cam, &f);
        let res = local_residual_jacobian(&track, &f, &state, &cam).unwrap();
        assert!(res.r.norm() < 1e-8);
        assert_eq!(res.r.len(), 8);
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let cam = camera();
        let eps = 1e-6;
        for _ in 0..20 {
            let (state, _) = window(&mut rng, 4);
            let f = Vector3::new(rng.random_range(5.0..20.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
            let mut track = observe(&state, &cam, &f);
            track.obs.remove(1);
            let base = local_residual_jacobian(&track, &f, &state, &cam).unwrap();
            let a = state.active_dim();
            let mut fd = DMatrix::zeros(base.r.len(), a);
            for i in 0..a {
                let mut d = DVector::zeros(a);
                d[i] = eps;
                let mut sp = state.clone();
                sp.retract_active(&d);
                let mut sm = state.clone();
                sm.retract_active(&(-d));
                let rp = local_residual_jacobian(&track, &f, &sp, &cam).unwrap().r;
                let rm = local_residual_jacobian(&track, &f, &sm, &cam).unwrap().r;
                // r = z − h, so ∂h = −∂r.
                fd.set_column(i, &(-(rp - rm) / (2.0 * eps)));
            }
            let err = (&base.h_x - &fd).abs().max() / fd.abs().max();
            assert!(err < 1e-4, "H_x rel err {err}");
            // Clone 1 does not observe the feature.
            assert_eq!(base.h_x.columns(state.clone_offset(1), 6).abs().max(), 0.0);
            let mut fdf = DMatrix::zeros(base.r.len(), 3);
            for i in 0..3 {
                let mut d = Vector3::zeros();
                d[i] = eps;
                let rp = local_residual_jacobian(&track, &(f + d), &state, &cam).unwrap().r;
                let rm = local_residual_jacobian(&track, &(f - d), &state, &cam).unwrap().r;
                fdf.set_column(i, &(-(rp - rm) / (2.0 * eps)));
            }
            let err = (&base.h_f - &fdf).abs().max() / fdf.abs().max();
            assert!(err < 1e-4, "H_f rel err {err}");
        }
    }

    #[test]
    fn perturbing_unobserving_clone_leaves_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let cam = camera();
        let (mut state, poses) = window(&mut rng, 4);
        let f = Vector3::new(9.0, 0.5, 0.3);
        let mut track = observe(&state, &cam, &f);
        track.obs.remove(2);
        let r0 = local_residual_jacobian(&track, &f, &state, &cam).unwrap().r;
        state.set_clone_pose(2, poses[2].retract(&nalgebra::Vector6::repeat(0.1)));
        let r1 = local_residual_jacobian(&track, &f, &state, &cam).unwrap().r;
        assert_eq!(r0, r1);
    }

    #[test]
    fn projected_rows_drop_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let cam = camera();
        let (state, _) = window(&mut rng, 4);
        let track = observe(&state, &cam, &Vector3::new(11.0, -1.0, 0.4));
        let m = local_measurement(&track, &state, &cam, 1.0).unwrap();
        assert_eq!(m.rows(), 5);
        assert!(m.r.norm() < 1e-6);
    }
}
