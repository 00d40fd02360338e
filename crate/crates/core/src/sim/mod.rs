//! Synthetic worlds: ground-truth motion, IMU readings, feature tracks, a
//! perturbed keyframe map with triangulated landmarks, and map match events.
//!
//! Generation is a pure function of `(SimConfig, seed)`. Each stream draws
//! from its own RNG stream so that changing one part of the configuration
//! does not reshuffle the others.

pub mod trajectory;

use std::collections::HashMap;

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PinholeCamera, Pose, UnitQuatJPL};
use crate::global::{restrict_matches, Map, MapKeyframe, MapLandmark, MatchPair, MatchSet};
use crate::imu::{ImuNoise, ImuSample, ImuState};
use crate::local::{triangulate, FeatureTrack};
use crate::state::PoseClone;

pub use trajectory::{PeriodicSpline, Trajectory, TrajectorySample, TrajectorySpec};

/// Gravity used by the simulator, world frame z up.
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    /// `ᴵp_C`, camera origin in the body frame.
    pub offset: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { fx: 450.0, fy: 450.0, cx: 320.0, cy: 240.0, width: 640.0, height: 480.0, offset: [0.1, 0.0, 0.05] }
    }
}

impl CameraConfig {
    /// Forward-looking camera: optical axis along body x, image x to the
    /// body's right, image y down.
    pub fn camera(&self) -> PinholeCamera {
        let r_ic = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        PinholeCamera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            Pose::from_parent_rotation(&r_ic, Vector3::from(self.offset)),
        )
    }

    pub fn in_image(&self, z: &Vector2<f64>) -> bool {
        z.x >= 0.0 && z.x < self.width && z.y >= 0.0 && z.y < self.height
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    /// Arc-length spacing of map keyframes, metres.
    pub keyframe_spacing: f64,
    /// Lateral offset of the mapping pass, metres (positive to the left).
    pub lateral_offset: f64,
    /// Per-axis variance of the keyframe position perturbation, m².
    pub sigma_p2: f64,
    /// Per-axis variance of the keyframe orientation perturbation, rad².
    pub sigma_o2: f64,
    pub landmarks_per_keyframe: usize,
    pub landmark_depth: [f64; 2],
    /// Neighbouring keyframes (each side) that may observe a landmark.
    pub observer_span: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            keyframe_spacing: 4.0,
            lateral_offset: 0.5,
            sigma_p2: 0.01,
            sigma_o2: 0.00025,
            landmarks_per_keyframe: 50,
            landmark_depth: [5.0, 40.0],
            observer_span: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Seconds between match attempts.
    pub period: f64,
    /// Probability that a match attempt yields nothing.
    pub dropout: f64,
    /// Keyframes returned per match event, nearest first.
    pub max_keyframes: usize,
    /// Landmarks used per matched keyframe.
    pub landmarks_per_keyframe: usize,
    /// Keyframes ahead of the query are ranked by how close their distance
    /// is to this value, metres.
    pub preferred_distance: f64,
    /// Optional interval `[start, start + duration)` without matches.
    pub dry_spell_start: Option<f64>,
    pub dry_spell_duration: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            period: 2.0,
            dropout: 0.3,
            max_keyframes: 3,
            landmarks_per_keyframe: 20,
            preferred_distance: 8.0,
            dry_spell_start: None,
            dry_spell_duration: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub trajectory: TrajectorySpec,
    /// Simulated time span; defaults to one lap.
    pub duration: Option<f64>,
    pub imu_rate: f64,
    pub camera_rate: f64,
    pub imu_noise: ImuNoise,
    /// Standard deviation of the initial gyro/accel biases.
    pub bias_init_sigma: [f64; 2],
    pub sigma_px: f64,
    pub camera: CameraConfig,
    /// Visible local features maintained per frame.
    pub features_per_frame: usize,
    pub feature_depth: [f64; 2],
    /// Observations after which a local feature is retired.
    pub max_track_length: usize,
    pub map: MapConfig,
    pub matches: MatchConfig,
    /// True `ᴳT_L` as yaw (rad) and translation (m).
    pub frame_offset_yaw: f64,
    pub frame_offset: [f64; 3],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec::default(),
            duration: None,
            imu_rate: 200.0,
            camera_rate: 10.0,
            imu_noise: ImuNoise::default(),
            bias_init_sigma: [1e-3, 2e-2],
            sigma_px: 1.0,
            camera: CameraConfig::default(),
            features_per_frame: 60,
            feature_depth: [3.0, 40.0],
            max_track_length: 11,
            map: MapConfig::default(),
            matches: MatchConfig::default(),
            frame_offset_yaw: 0.0,
            frame_offset: [0.0; 3],
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let n = &self.imu_noise;
        if [n.sigma_g, n.sigma_a, n.sigma_bg, n.sigma_ba].iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("IMU noise densities must be non-negative".into()));
        }
        let pos =
            |v: f64, what: &str| if v > 0.0 { Ok(()) } else { Err(Error::Config(format!("{what} must be positive"))) };
        pos(self.imu_rate, "imu_rate")?;
        pos(self.camera_rate, "camera_rate")?;
        pos(self.map.keyframe_spacing, "map.keyframe_spacing")?;
        pos(self.matches.period, "matches.period")?;
        let ratio = self.imu_rate / self.camera_rate;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::Config("imu_rate must be an integer multiple of camera_rate".into()));
        }
        if self.sigma_px < 0.0 || self.map.sigma_p2 < 0.0 || self.map.sigma_o2 < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.matches.dropout) {
            return Err(Error::Config("matches.dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// True `ᴳT_L`.
    pub fn frame_offset_pose(&self) -> Pose {
        let r = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), self.frame_offset_yaw).into_inner();
        Pose::from_parent_rotation(&r, Vector3::from(self.frame_offset))
    }
}

/// Feature observations of one camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    pub t: f64,
    pub obs: Vec<(u64, Vector2<f64>)>,
}

/// True body state at a camera time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub t: f64,
    /// `ᴳT_I`.
    pub pose: Pose,
    /// `ᴳv_I`.
    pub vel: Vector3<f64>,
    pub bg: Vector3<f64>,
    pub ba: Vector3<f64>,
}

/// Everything a run needs, plus the truth used to score it.
#[derive(Clone, Debug)]
pub struct SimWorld {
    pub seed: u64,
    pub camera: PinholeCamera,
    pub trajectory: Trajectory,
    pub frame_offset: Pose,
    /// Filter initial state in the local frame (true pose, zero biases).
    pub initial_state: ImuState,
    pub imu: Vec<ImuSample>,
    pub frames: Vec<CameraFrame>,
    pub matches: Vec<MatchSet>,
    pub map: Map,
    pub truth: Vec<GroundTruth>,
    pub true_keyframes: Vec<Pose>,
    pub true_landmarks: HashMap<u64, Vector3<f64>>,
    pub true_features: HashMap<u64, Vector3<f64>>,
}

impl SimWorld {
    /// The match stream as seen by a mode that may use `max_keyframes`
    /// matched keyframes per event.
    pub fn restricted_matches(&self, max_keyframes: usize) -> Result<Vec<MatchSet>> {
        self.matches.iter().map(|m| restrict_matches(m, &self.map, max_keyframes)).collect()
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng))
}

fn gauss2(rng: &mut ChaCha8Rng) -> Vector2<f64> {
    Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
}

/// Builds the ground-truth trajectory.
pub fn generate_trajectory(cfg: &SimConfig) -> Result<Trajectory> {
    Trajectory::from_spec(&cfg.trajectory)
}

/// IMU readings at the IMU rate with bias random walks and white noise.
/// Also returns the true biases at each sample.
#[allow(clippy::type_complexity)]
pub fn synthesize_imu(
    traj: &Trajectory,
    cfg: &SimConfig,
    seed: u64,
) -> (Vec<ImuSample>, Vec<(Vector3<f64>, Vector3<f64>)>) {
    let mut rng = rng_for(seed, 1);
    let dt = 1.0 / cfg.imu_rate;
    let n = (sim_duration(traj, cfg) * cfg.imu_rate).round() as usize + 1;
    let nz = &cfg.imu_noise;
    let mut bg = gauss3(&mut rng) * cfg.bias_init_sigma[0];
    let mut ba = gauss3(&mut rng) * cfg.bias_init_sigma[1];
    let mut out = Vec::with_capacity(n);
    let mut biases = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * dt;
        let s = traj.sample(t);
        let f = s.r_gi.transpose() * (s.a - GRAVITY);
        let wg = gauss3(&mut rng) * (nz.sigma_g / dt.sqrt());
        let wa = gauss3(&mut rng) * (nz.sigma_a / dt.sqrt());
        out.push(ImuSample { t, gyro: s.omega + bg + wg, accel: f + ba + wa });
        biases.push((bg, ba));
        bg += gauss3(&mut rng) * (nz.sigma_bg * dt.sqrt());
        ba += gauss3(&mut rng) * (nz.sigma_ba * dt.sqrt());
    }
    (out, biases)
}

fn sim_duration(traj: &Trajectory, cfg: &SimConfig) -> f64 {
    cfg.duration.unwrap_or_else(|| traj.duration())
}

/// Camera pose `ᴳT_C` of the true body at `s`.
fn camera_pose(s: &TrajectorySample, cam: &PinholeCamera) -> Pose {
    s.pose().compose(&cam.extrinsic)
}

/// True map keyframe camera poses along the laterally offset mapping pass.
pub fn map_keyframe_poses(traj: &Trajectory, cfg: &SimConfig) -> Vec<Pose> {
    let cam = cfg.camera.camera();
    let lap = traj.duration();
    let n_fine = 20_000;
    let dt = lap / n_fine as f64;
    let mut out = Vec::new();
    let mut travelled = 0.0;
    let mut next = 0.0;
    let mut prev = traj.sample(0.0).p;
    for k in 0..n_fine {
        let s = traj.sample(k as f64 * dt);
        travelled += (s.p - prev).norm();
        prev = s.p;
        if travelled + 1e-9 >= next {
            let left = s.r_gi.column(1).into_owned();
            let mut body = s;
            body.p += left * cfg.map.lateral_offset;
            out.push(camera_pose(&body, &cam));
            next += cfg.map.keyframe_spacing;
        }
        if matches!(traj, Trajectory::Stationary { .. }) {
            break;
        }
    }
    out
}

/// Perturbs each pose so that `truth = estimate.retract(δ)` with
/// `δ ~ N(0, diag(σ_o²·I₃, σ_p²·I₃))`. Returns estimates and the stored
/// covariance.
pub fn perturb_map(truth: &[Pose], sigma_o2: f64, sigma_p2: f64, seed: u64) -> (Vec<Pose>, Matrix6<f64>) {
    let mut rng = rng_for(seed, 2);
    let cov = Matrix6::from_diagonal(&Vector6::new(sigma_o2, sigma_o2, sigma_o2, sigma_p2, sigma_p2, sigma_p2));
    let est = truth
        .iter()
        .map(|t| {
            let dth = gauss3(&mut rng) * sigma_o2.sqrt();
            let dp = gauss3(&mut rng) * sigma_p2.sqrt();
            let rot = if dth == Vector3::zeros() { t.rot } else { UnitQuatJPL::from_rotvec(&dth).inverse() * t.rot };
            Pose::new(rot, t.trans - dp)
        })
        .collect();
    (est, cov)
}

/// Map landmarks: true points seen from each keyframe, observed with pixel
/// noise by nearby keyframes, triangulated with the perturbed poses and
/// anchored in the spawning keyframe. Also returns, per landmark, its
/// noisy pixel observations by other keyframes.
#[allow(clippy::type_complexity)]
pub fn generate_map_landmarks(
    true_kfs: &[Pose],
    est_kfs: &[Pose],
    cfg: &SimConfig,
    seed: u64,
) -> (Vec<MapLandmark>, HashMap<u64, Vector3<f64>>, HashMap<u64, Vec<(u64, Vector2<f64>)>>) {
    let mut rng = rng_for(seed, 3);
    let cam_cfg = &cfg.camera;
    let kcam = cam_cfg.camera().with_extrinsic(Pose::identity());
    let n = true_kfs.len();
    let span = cfg.map.observer_span;
    let mut landmarks = Vec::new();
    let mut truth = HashMap::new();
    let mut observations = HashMap::new();
    let mut next_id = 0u64;
    for a in 0..n {
        for _ in 0..cfg.map.landmarks_per_keyframe {
            let z0 = Vector2::new(rng.random_range(0.0..cam_cfg.width), rng.random_range(0.0..cam_cfg.height));
            let depth = rng.random_range(cfg.map.landmark_depth[0]..cfg.map.landmark_depth[1]);
            let p_g = true_kfs[a].transform_point(&(kcam.unproject(&z0) * depth));
            let mut obs: Vec<(usize, Vector2<f64>)> = Vec::new();
            let lo = a.saturating_sub(span);
            let hi = (a + span).min(n - 1);
            for (b, kf) in true_kfs.iter().enumerate().take(hi + 1).skip(lo) {
                let Some(z) = kcam.project(&kf.inverse_transform_point(&p_g)) else { continue };
                let zn = z + gauss2(&mut rng) * cfg.sigma_px;
                if b == a || cam_cfg.in_image(&zn) {
                    obs.push((b, zn));
                }
            }
            let id = next_id;
            next_id += 1;
            if obs.len() < 2 {
                continue;
            }
            let clones: Vec<PoseClone> =
                obs.iter().map(|(b, _)| PoseClone { t: *b as f64, pose: est_kfs[*b] }).collect();
            let track = FeatureTrack { id, obs: obs.iter().map(|(b, z)| (*b as f64, *z)).collect() };
            let Ok(p_hat) = triangulate(&track, &clones, &kcam) else { continue };
            let anchor_px = obs.iter().find(|(b, _)| *b == a).unwrap().1;
            landmarks.push(MapLandmark {
                id,
                anchor: a as u64,
                p: est_kfs[a].inverse_transform_point(&p_hat),
                anchor_px,
            });
            truth.insert(id, p_g);
            observations.insert(id, obs.iter().filter(|(b, _)| *b != a).map(|(b, z)| (*b as u64, *z)).collect());
        }
    }
    (landmarks, truth, observations)
}

/// Local feature observations at every camera frame, and the true world
/// position of every feature.
pub fn generate_local_tracks(
    traj: &Trajectory,
    cfg: &SimConfig,
    times: &[f64],
    seed: u64,
) -> (Vec<CameraFrame>, HashMap<u64, Vector3<f64>>) {
    let mut rng = rng_for(seed, 4);
    let cam = cfg.camera.camera();
    struct Live {
        id: u64,
        p: Vector3<f64>,
        seen: usize,
    }
    let mut live: Vec<Live> = Vec::new();
    let mut next_id = 0u64;
    let mut frames = Vec::with_capacity(times.len());
    let mut points = HashMap::new();
    for &t in times {
        let cpose = camera_pose(&traj.sample(t), &cam);
        let mut obs = Vec::new();
        live.retain_mut(|f| {
            if f.seen >= cfg.max_track_length {
                return false;
            }
            let Some(z) = cam.project(&cpose.inverse_transform_point(&f.p)) else { return false };
            if !cfg.camera.in_image(&z) {
                return false;
            }
            f.seen += 1;
            obs.push((f.id, z + gauss2(&mut rng) * cfg.sigma_px));
            true
        });
        while live.len() < cfg.features_per_frame {
            let z = Vector2::new(rng.random_range(0.0..cfg.camera.width), rng.random_range(0.0..cfg.camera.height));
            let depth = rng.random_range(cfg.feature_depth[0]..cfg.feature_depth[1]);
            let p = cpose.transform_point(&(cam.unproject(&z) * depth));
            let id = next_id;
            next_id += 1;
            live.push(Live { id, p, seen: 1 });
            points.insert(id, p);
            obs.push((id, z + gauss2(&mut rng) * cfg.sigma_px));
        }
        frames.push(CameraFrame { t, obs });
    }
    (frames, points)
}

/// Match events: at each attempt the keyframes ahead of the query whose
/// distance is closest to the preferred one, and their landmarks visible in
/// the query image.
#[allow(clippy::too_many_arguments)]
pub fn generate_matches(
    traj: &Trajectory,
    cfg: &SimConfig,
    times: &[f64],
    true_kfs: &[Pose],
    map: &Map,
    true_landmarks: &HashMap<u64, Vector3<f64>>,
    observations: &HashMap<u64, Vec<(u64, Vector2<f64>)>>,
    seed: u64,
) -> Vec<MatchSet> {
    let mut rng = rng_for(seed, 5);
    let cam = cfg.camera.camera();
    let mc = &cfg.matches;
    let frames_per_match = (mc.period * cfg.camera_rate).round().max(1.0) as usize;
    let mut by_anchor: HashMap<u64, Vec<&MapLandmark>> = HashMap::new();
    for lm in map.landmarks() {
        by_anchor.entry(lm.anchor).or_default().push(lm);
    }
    let mut out = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        if k == 0 || k % frames_per_match != 0 {
            continue;
        }
        if rng.random::<f64>() < mc.dropout {
            continue;
        }
        if let Some(start) = mc.dry_spell_start {
            if t >= start && t < start + mc.dry_spell_duration {
                continue;
            }
        }
        let s = traj.sample(t);
        let cpose = camera_pose(&s, &cam);
        let fwd_q = cpose.rot_mat().row(2).transpose();
        let mut order: Vec<usize> = (0..true_kfs.len())
            .filter(|i| {
                // Keyframes must look roughly the same way and lie ahead.
                let fwd_kf = true_kfs[*i].rot_mat().row(2).transpose();
                fwd_kf.dot(&fwd_q) > 0.7 && (true_kfs[*i].trans - cpose.trans).dot(&fwd_q) > 0.0
            })
            .collect();
        let rank = |i: usize| ((true_kfs[i].trans - cpose.trans).norm() - mc.preferred_distance).abs();
        order.sort_by(|a, b| rank(*a).total_cmp(&rank(*b)).then(a.cmp(b)));
        let chosen: Vec<u64> = order.into_iter().take(mc.max_keyframes).map(|i| i as u64).collect();
        let mut pairs = Vec::new();
        for kf in &chosen {
            let mut taken = 0;
            for lm in by_anchor.get(kf).map(|v| v.as_slice()).unwrap_or(&[]) {
                if taken >= mc.landmarks_per_keyframe {
                    break;
                }
                let p_g = true_landmarks[&lm.id];
                let Some(z) = cam.project(&cpose.inverse_transform_point(&p_g)) else { continue };
                if !cfg.camera.in_image(&z) {
                    continue;
                }
                let zq = z + gauss2(&mut rng) * cfg.sigma_px;
                let observers = observations[&lm.id]
                    .iter()
                    .filter(|(b, _)| chosen.contains(b))
                    .map(|(b, z)| (*b, [z.x, z.y]))
                    .collect();
                pairs.push(MatchPair { landmark: lm.id, query_px: [zq.x, zq.y], observers });
                taken += 1;
            }
        }
        if !pairs.is_empty() {
            out.push(MatchSet { t, keyframes: chosen, pairs });
        }
    }
    out
}

/// Generates a complete world.
pub fn generate_world(cfg: &SimConfig, seed: u64) -> Result<SimWorld> {
    cfg.validate()?;
    let traj = generate_trajectory(cfg)?;
    let cam = cfg.camera.camera();
    let (imu, biases) = synthesize_imu(&traj, cfg, seed);
    let step = (cfg.imu_rate / cfg.camera_rate).round() as usize;
    let cam_idx: Vec<usize> = (0..imu.len()).step_by(step).collect();
    let times: Vec<f64> = cam_idx.iter().map(|i| imu[*i].t).collect();

    let offset = cfg.frame_offset_pose();
    let truth: Vec<GroundTruth> = cam_idx
        .iter()
        .map(|i| {
            let s = traj.sample(imu[*i].t);
            GroundTruth { t: s.t, pose: s.pose(), vel: s.v, bg: biases[*i].0, ba: biases[*i].1 }
        })
        .collect();

    let true_kfs = map_keyframe_poses(&traj, cfg);
    let (est_kfs, kf_cov) = perturb_map(&true_kfs, cfg.map.sigma_o2, cfg.map.sigma_p2, seed);
    let (landmarks, true_landmarks, observations) = generate_map_landmarks(&true_kfs, &est_kfs, cfg, seed);
    let keyframes =
        est_kfs.iter().enumerate().map(|(i, p)| MapKeyframe { id: i as u64, pose: *p, cov: kf_cov }).collect();
    let map = Map::new(cam, keyframes, landmarks)?;
    let (frames, true_features) = generate_local_tracks(&traj, cfg, &times, seed);
    let matches = generate_matches(&traj, cfg, &times, &true_kfs, &map, &true_landmarks, &observations, seed);

    let s0 = traj.sample(0.0);
    let local0 = offset.inverse().compose(&s0.pose());
    let v_l = offset.rot_mat() * s0.v;
    let initial_state = ImuState { q: local0.rot, p: local0.trans, v: v_l, bg: Vector3::zeros(), ba: Vector3::zeros() };

    Ok(SimWorld {
        seed,
        camera: cam,
        trajectory: traj,
        frame_offset: offset,
        initial_state,
        imu,
        frames,
        matches,
        map,
        truth,
        true_keyframes: true_kfs,
        true_landmarks,
        true_features,
    })
}
