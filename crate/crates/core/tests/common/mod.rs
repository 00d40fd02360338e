//! Random problem generators and independent oracles shared by the
//! integration tests and the acceptance runner.
#![allow(dead_code)]

use csmsckf::geometry::{PinholeCamera, Pose, UnitQuatJPL};
use csmsckf::global::{raw_landmark_residual, Map, MapKeyframe, MapLandmark, MapTreatment, MatchPair, MatchSet};
use csmsckf::imu::{propagate_jacobians, propagate_state, ImuSample, ImuState, Matrix15};
use csmsckf::local::{local_residual_jacobian, FeatureTrack};
use csmsckf::sim::CameraConfig;
use csmsckf::state::{augment_clone, augment_keyframes, init_rel_transform, BlockCovariance, StateVector};
use csmsckf::update::{ekf_update, nullspace_project, Measurement};
use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vec3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

pub fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
    Pose::new(UnitQuatJPL::from_rotvec(&vec3(rng, rot)), vec3(rng, trans))
}

/// `A·Aᵀ/n + floor·I` scaled by `scale`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose() / n as f64 + DMatrix::identity(n, n) * floor) * scale
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigen().eigenvalues.min()
}

/// Largest elementwise difference relative to the largest entry of `b`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max() / b.abs().max().max(1e-12)
}

/// Random partitioned problem: state with `clones` clones, `x_t`, and
/// `keyframes` nuisance keyframes; random SPD joint covariance; a random
/// measurement touching a random subset of the keyframes.
pub fn random_partitioned(rng: &mut ChaCha8Rng) -> (StateVector, BlockCovariance, Measurement) {
    let clones = rng.random_range(1..4);
    let keyframes = rng.random_range(1..6);
    let mut state = StateVector::new(ImuState::default(), 10);
    let mut cov = BlockCovariance::new_imu(&Matrix15::identity());
    for k in 0..clones {
        augment_clone(&mut state, &mut cov, k as f64).unwrap();
    }
    init_rel_transform(&mut state, &mut cov, Pose::identity(), &Matrix6::identity()).unwrap();
    let poses: Vec<Pose> = (0..keyframes).map(|_| random_pose(rng, 0.5, 10.0)).collect();
    let c6 = Matrix6::identity();
    augment_keyframes(&mut state, &mut cov, poses.iter().enumerate().map(|(i, p)| (i as u64, p, &c6)));
    let a = state.active_dim();
    let n = state.nuisance_dim();
    let scale = rng.random_range(0.01..10.0);
    let full = random_spd(rng, a + n, scale, 0.05);
    let cov = BlockCovariance::from_full(&full, a);
    let rows = rng.random_range(1..12);
    let mut slots: Vec<usize> = (0..keyframes).filter(|_| rng.random_bool(0.6)).collect();
    if slots.is_empty() {
        slots.push(0);
    }
    let meas = Measurement {
        r: DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0)),
        h_active: random_matrix(rng, rows, a),
        h_nuisance: random_matrix(rng, rows, 6 * slots.len()),
        nuisance_slots: slots,
        noise_var: rng.random_range(0.01..2.0),
    };
    (state, cov, meas)
}

pub fn query_camera() -> PinholeCamera {
    CameraConfig::default().camera()
}

pub fn map_camera() -> PinholeCamera {
    let c = query_camera();
    PinholeCamera::new(c.fx, c.fy, c.cx, c.cy, Pose::identity())
}

/// One query image matched against a few keyframes near it.
pub struct GlobalScene {
    pub state: StateVector,
    pub cov: BlockCovariance,
    pub map: Map,
    pub cam: PinholeCamera,
    pub m: MatchSet,
}

/// Consistent geometry with exact pixels: the query camera looks at
/// landmarks 5 to 15 m ahead, `kfs` keyframes sit within a few meters of
/// it, each landmark is anchored in keyframe 0 and seen by all keyframes.
pub fn global_scene(rng: &mut ChaCha8Rng, kfs: usize, landmarks: usize) -> GlobalScene {
    let cam = query_camera();
    let kcam = map_camera();
    let t = 1.0;
    let xt = random_pose(rng, 0.3, 5.0);
    let clone = random_pose(rng, 0.3, 5.0);
    let g_t_c = xt.compose(&clone).compose(&cam.extrinsic);
    let kf_poses: Vec<Pose> = (0..kfs)
        .map(|_| {
            let rel = Pose::new(
                UnitQuatJPL::from_rotvec(&vec3(rng, 0.1)),
                Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-0.5..0.5), rng.random_range(0.5..4.0)),
            );
            g_t_c.compose(&rel)
        })
        .collect();
    let mut lms = Vec::new();
    let mut pairs = Vec::new();
    let mut id = 0u64;
    while lms.len() < landmarks {
        let d = rng.random_range(5.0..15.0);
        let p_c = Vector3::new(rng.random_range(-0.4..0.4) * d, rng.random_range(-0.3..0.3) * d, d);
        let p_g = g_t_c.transform_point(&p_c);
        let obs: Option<Vec<_>> = kf_poses.iter().map(|k| kcam.project(&k.inverse_transform_point(&p_g))).collect();
        let Some(obs) = obs else { continue };
        let z = cam.project(&p_c).unwrap();
        lms.push(MapLandmark { id, anchor: 0, p: kf_poses[0].inverse_transform_point(&p_g), anchor_px: obs[0] });
        pairs.push(MatchPair {
            landmark: id,
            query_px: [z.x, z.y],
            observers: obs.iter().enumerate().map(|(k, z)| (k as u64, [z.x, z.y])).collect(),
        });
        id += 1;
    }
    let cov6 = Matrix6::from_diagonal(&Vector6::new(2.5e-4, 2.5e-4, 2.5e-4, 0.01, 0.01, 0.01));
    let keyframes: Vec<MapKeyframe> =
        kf_poses.iter().enumerate().map(|(i, p)| MapKeyframe { id: i as u64, pose: *p, cov: cov6 }).collect();
    let map = Map::new(kcam, keyframes, lms).unwrap();

    let mut state = StateVector::new(ImuState::default(), 10);
    state.imu.q = clone.rot;
    state.imu.p = clone.trans;
    let mut cov = BlockCovariance::new_imu(&Matrix15::identity());
    augment_clone(&mut state, &mut cov, t).unwrap();
    init_rel_transform(&mut state, &mut cov, xt, &Matrix6::identity()).unwrap();
    augment_keyframes(&mut state, &mut cov, map.keyframes().iter().map(|k| (k.id, &k.pose, &k.cov)));
    let m = MatchSet { t, keyframes: (0..kfs as u64).collect(), pairs };
    GlobalScene { state, cov, map, cam, m }
}

/// Adds pixel noise to every observation of the scene's matches.
pub fn add_pixel_noise(scene: &mut GlobalScene, rng: &mut ChaCha8Rng, sigma: f64) {
    let mut n = || rng.random_range(-sigma..sigma) * 3f64.sqrt();
    for p in &mut scene.m.pairs {
        p.query_px[0] += n();
        p.query_px[1] += n();
        for o in &mut p.observers {
            o.1[0] += n();
            o.1[1] += n();
        }
    }
}

/// Analytic and central-difference Jacobians of one global landmark's
/// observation function: `(H_A, H_N, H_f)` each as `(analytic, numeric)`.
pub struct GlobalJacobians {
    pub rows: usize,
    pub h_a: (DMatrix<f64>, DMatrix<f64>),
    pub h_n: (DMatrix<f64>, DMatrix<f64>),
    pub h_f: (DMatrix<f64>, DMatrix<f64>),
}

pub fn global_jacobians(scene: &GlobalScene, pair: usize) -> GlobalJacobians {
    let GlobalScene { state, map, cam, m, .. } = scene;
    let pr = &m.pairs[pair];
    let lm = map.landmark(pr.landmark).unwrap();
    let res = |s: &StateVector, p: &Vector3<f64>| {
        raw_landmark_residual(s, m, pr, p, map, cam, MapTreatment::Consistent, None).unwrap()
    };
    let base = res(state, &lm.p);
    let rows = base.r.len();
    let a = state.active_dim();
    let n = state.nuisance_dim();
    let mut fa = DMatrix::zeros(rows, a);
    for i in 0..a {
        let mut d = DVector::zeros(a);
        d[i] = FD_EPS;
        let (mut sp, mut sm) = (state.clone(), state.clone());
        sp.retract_active(&d);
        sm.retract_active(&(-d));
        // r = z − h, so ∂h = −∂r.
        fa.set_column(i, &(-(res(&sp, &lm.p).r - res(&sm, &lm.p).r) / (2.0 * FD_EPS)));
    }
    let mut fnn = DMatrix::zeros(rows, n);
    for i in 0..n {
        let mut d = DVector::zeros(n);
        d[i] = FD_EPS;
        let (mut sp, mut sm) = (state.clone(), state.clone());
        sp.retract_nuisance(&d);
        sm.retract_nuisance(&(-d));
        fnn.set_column(i, &(-(res(&sp, &lm.p).r - res(&sm, &lm.p).r) / (2.0 * FD_EPS)));
    }
    let mut ff = DMatrix::zeros(rows, 3);
    for i in 0..3 {
        let mut d = Vector3::zeros();
        d[i] = FD_EPS;
        ff.set_column(i, &(-(res(state, &(lm.p + d)).r - res(state, &(lm.p - d)).r) / (2.0 * FD_EPS)));
    }
    GlobalJacobians { rows, h_a: (base.h_active, fa), h_n: (base.h_nuisance, fnn), h_f: (base.h_f, ff) }
}

/// Relative error of an analytic block against its numeric counterpart on
/// a row range; blocks that are numerically zero must be analytically zero.
pub fn block_err(pair: &(DMatrix<f64>, DMatrix<f64>), r0: usize, nr: usize) -> f64 {
    let a = pair.0.rows(r0, nr).into_owned();
    let b = pair.1.rows(r0, nr).into_owned();
    if b.abs().max() < 1e-9 {
        return a.abs().max();
    }
    rel_err(&a, &b)
}

pub fn random_imu(rng: &mut ChaCha8Rng) -> (ImuState, ImuSample, f64) {
    let x = ImuState {
        q: UnitQuatJPL::from_rotvec(&vec3(rng, 2.0)),
        p: vec3(rng, 10.0),
        v: vec3(rng, 5.0),
        bg: vec3(rng, 0.01),
        ba: vec3(rng, 0.1),
    };
    let s = ImuSample {
        t: 0.0,
        gyro: vec3(rng, 2.0),
        accel: Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(5.0..15.0)),
    };
    (x, s, rng.random_range(0.001..0.05))
}

/// `(Φ, G)` analytic against central differences; returns the two relative
/// errors. Noise enters as `ω = ω_m − b_g − n_g`, `a = a_m − b_a − n_a` and
/// additively on the biases.
pub fn propagation_jacobian_errors(x: &ImuState, s: &ImuSample, dt: f64) -> (f64, f64) {
    let g = Vector3::new(0.0, 0.0, -9.81);
    let (phi, gm) = propagate_jacobians(x, s, dt).unwrap();
    let x1 = propagate_state(x, s, dt, &g).unwrap();
    let lift = |y: &ImuState| DVector::from_column_slice(y.lift(&x1).to_vector().as_slice());
    let mut fphi = DMatrix::zeros(15, 15);
    for i in 0..15 {
        let mut d = csmsckf::imu::Vector15::zeros();
        d[i] = FD_EPS;
        let xp = x.retract(&csmsckf::imu::ErrorState::from_vector(&d));
        let xm = x.retract(&csmsckf::imu::ErrorState::from_vector(&(-d)));
        let yp = propagate_state(&xp, s, dt, &g).unwrap();
        let ym = propagate_state(&xm, s, dt, &g).unwrap();
        fphi.set_column(i, &((lift(&yp) - lift(&ym)) / (2.0 * FD_EPS)));
    }
    let mut fg = DMatrix::zeros(15, 12);
    for i in 0..6 {
        let mut sp = *s;
        let mut sm = *s;
        let (vp, vm) = if i < 3 { (&mut sp.gyro, &mut sm.gyro) } else { (&mut sp.accel, &mut sm.accel) };
        vp[i % 3] -= FD_EPS;
        vm[i % 3] += FD_EPS;
        let yp = propagate_state(x, &sp, dt, &g).unwrap();
        let ym = propagate_state(x, &sm, dt, &g).unwrap();
        fg.set_column(i, &((lift(&yp) - lift(&ym)) / (2.0 * FD_EPS)));
    }
    for i in 6..12 {
        let y = |sign: f64| {
            let mut y = x1;
            let d = Vector3::from_fn(|k, _| if k == i % 3 { sign * FD_EPS } else { 0.0 });
            if i < 9 {
                y.bg += d;
            } else {
                y.ba += d;
            }
            y
        };
        fg.set_column(i, &((lift(&y(1.0)) - lift(&y(-1.0))) / (2.0 * FD_EPS)));
    }
    let phi_d = DMatrix::from_column_slice(15, 15, phi.as_slice());
    let g_d = DMatrix::from_column_slice(15, 12, gm.as_slice());
    (rel_err(&phi_d, &fphi), rel_err(&g_d, &fg))
}

/// A window of `n` clones moving forward and a feature track seen by all of
/// them except one.
pub fn local_problem(rng: &mut ChaCha8Rng, n: usize) -> (StateVector, FeatureTrack, Vector3<f64>, PinholeCamera) {
    let cam = query_camera();
    let mut state = StateVector::new(ImuState::default(), 20);
    let mut cov = BlockCovariance::new_imu(&Matrix15::identity());
    for k in 0..n {
        let pose = Pose::new(
            UnitQuatJPL::from_rotvec(&Vector3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.1..0.1),
            )),
            Vector3::new(0.5 * k as f64, rng.random_range(-0.2..0.2), 0.0),
        );
        state.imu.q = pose.rot;
        state.imu.p = pose.trans;
        augment_clone(&mut state, &mut cov, k as f64).unwrap();
    }
    let f = Vector3::new(rng.random_range(6.0..20.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
    let mut track = FeatureTrack::new(0);
    for c in state.clones() {
        let p_c = cam.extrinsic.inverse_transform_point(&c.pose.inverse_transform_point(&f));
        track.obs.push((c.t, cam.project(&p_c).unwrap()));
    }
    if n > 2 {
        track.obs.remove(1);
    }
    (state, track, f, cam)
}

/// `(H_x, H_f)` relative errors of the local observation function.
pub fn local_jacobian_errors(
    state: &StateVector,
    track: &FeatureTrack,
    f: &Vector3<f64>,
    cam: &PinholeCamera,
) -> (f64, f64) {
    let res = |s: &StateVector, f: &Vector3<f64>| local_residual_jacobian(track, f, s, cam).unwrap();
    let base = res(state, f);
    let a = state.active_dim();
    let mut fx = DMatrix::zeros(base.r.len(), a);
    for i in 0..a {
        let mut d = DVector::zeros(a);
        d[i] = FD_EPS;
        let (mut sp, mut sm) = (state.clone(), state.clone());
        sp.retract_active(&d);
        sm.retract_active(&(-d));
        fx.set_column(i, &(-(res(&sp, f).r - res(&sm, f).r) / (2.0 * FD_EPS)));
    }
    let mut ff = DMatrix::zeros(base.r.len(), 3);
    for i in 0..3 {
        let mut d = Vector3::zeros();
        d[i] = FD_EPS;
        ff.set_column(i, &(-(res(state, &(f + d)).r - res(state, &(f - d)).r) / (2.0 * FD_EPS)));
    }
    (rel_err(&base.h_x, &fx), rel_err(&base.h_f, &ff))
}

/// Joint update with the landmark as an extra state under a flat prior,
/// followed by marginalizing it, in information form:
/// `Λ = [P⁻¹ 0; 0 0] + JᵀJ/σ²`, `δ = Λ⁻¹·Jᵀr/σ²`, keep the `x` block.
/// Returns `(δx, P⁺)`.
pub fn joint_update_oracle(
    p: &DMatrix<f64>,
    r: &DVector<f64>,
    h_x: &DMatrix<f64>,
    h_f: &DMatrix<f64>,
    sigma2: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = p.nrows();
    let k = h_f.ncols();
    let mut j = DMatrix::zeros(r.len(), n + k);
    j.columns_mut(0, n).copy_from(h_x);
    j.columns_mut(n, k).copy_from(h_f);
    let mut info = j.transpose() * &j / sigma2;
    let p_inv = p.clone().cholesky().unwrap().inverse();
    let cur = info.view((0, 0), (n, n)) + p_inv;
    info.view_mut((0, 0), (n, n)).copy_from(&cur);
    let post = info.clone().cholesky().expect("landmark observable").inverse();
    let delta = &post * (j.transpose() * r / sigma2);
    (delta.rows(0, n).into_owned(), post.view((0, 0), (n, n)).into_owned())
}

/// `after ⊟ before` over the whole state, active block then nuisance block.
pub fn state_delta(after: &StateVector, before: &StateVector) -> DVector<f64> {
    let mut v: Vec<f64> = after.imu.lift(&before.imu).to_vector().iter().copied().collect();
    for (a, b) in after.clones().iter().zip(before.clones()) {
        v.extend(a.pose.lift(&b.pose).iter());
    }
    if let (Some(a), Some(b)) = (after.rel_transform(), before.rel_transform()) {
        v.extend(a.lift(b).iter());
    }
    for ((_, a), (_, b)) in after.keyframes().iter().zip(before.keyframes()) {
        v.extend(a.lift(b).iter());
    }
    DVector::from_vec(v)
}

/// `(state, cov, r, H_x, H_f)` for one linearized landmark.
pub type LandmarkProblem = (StateVector, BlockCovariance, DVector<f64>, DMatrix<f64>, DMatrix<f64>);

/// Local window with `n` clones, noisy pixels, a perturbed landmark
/// estimate and a random SPD covariance.
pub fn local_landmark_problem(rng: &mut ChaCha8Rng, n: usize) -> LandmarkProblem {
    let (mut state, mut track, f, cam) = local_problem(rng, n);
    for o in &mut track.obs {
        o.1 += vec3(rng, 1.0).xy();
    }
    let a = state.active_dim();
    let cov = BlockCovariance::from_full(&random_spd(rng, a, 1e-3, 0.1), a);
    state.imu.v = vec3(rng, 1.0);
    let f_hat = f + vec3(rng, 0.05);
    let res = local_residual_jacobian(&track, &f_hat, &state, &cam).unwrap();
    (state, cov, res.r, res.h_x, res.h_f)
}

/// Query matched against `kfs` keyframes, with keyframe poses in the state
/// and the landmark kept as an explicit error state.
pub fn global_landmark_problem(rng: &mut ChaCha8Rng, kfs: usize) -> LandmarkProblem {
    let mut scene = global_scene(rng, kfs, 1);
    add_pixel_noise(&mut scene, rng, 1.0);
    let a = scene.state.active_dim();
    let dim = a + scene.state.nuisance_dim();
    let cov = BlockCovariance::from_full(&random_spd(rng, dim, 1e-3, 0.1), a);
    let pr = &scene.m.pairs[0];
    let p = scene.map.landmark(pr.landmark).unwrap().p;
    let raw =
        raw_landmark_residual(&scene.state, &scene.m, pr, &p, &scene.map, &scene.cam, MapTreatment::Consistent, None)
            .unwrap();
    let mut h_x = DMatrix::zeros(raw.r.len(), dim);
    h_x.columns_mut(0, a).copy_from(&raw.h_active);
    h_x.columns_mut(a, dim - a).copy_from(&raw.h_nuisance);
    (scene.state, cov, raw.r, h_x, raw.h_f)
}

/// Null-space projection followed by the library EKF update, against the
/// joint landmark oracle. Returns `(covariance, mean)` relative errors, or
/// `None` if the projection is degenerate or the update does not apply.
pub fn nullspace_route_errors(p: &LandmarkProblem, sigma2: f64) -> Option<(f64, f64)> {
    let (state, cov, r, h_x, h_f) = p;
    let a = state.active_dim();
    let n = state.nuisance_dim();
    let (dx_o, p_o) = joint_update_oracle(&cov.full(), r, h_x, h_f, sigma2);
    let proj = nullspace_project(r, h_x, h_f);
    if proj.degenerate || proj.r.len() != r.len() - 3 {
        return None;
    }
    let meas = Measurement {
        r: proj.r,
        h_active: proj.h.columns(0, a).into_owned(),
        h_nuisance: proj.h.columns(a, n).into_owned(),
        nuisance_slots: (0..n / 6).collect(),
        noise_var: sigma2,
    };
    let (mut s, mut c) = (state.clone(), cov.clone());
    if !ekf_update(&mut s, &mut c, &meas).applied() {
        return None;
    }
    let dx = state_delta(&s, state);
    let e_x = (&dx - &dx_o).abs().max() / dx_o.abs().max().max(1e-12);
    Some((rel_err(&c.full(), &p_o), e_x))
}
