//! The estimator: IMU propagation, stochastic cloning, local feature
//! updates over a sliding window, and map-based updates of the global frame
//! offset.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, info};
use nalgebra::{Matrix3, Matrix6, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::epnp::RansacConfig;
use crate::error::{Error, Result};
use crate::geometry::{skew, PinholeCamera, Pose};
use crate::global::{
    augment_match_keyframes, build_global_residual, initialize_global, relinearize, restrict_matches, Map,
    MapTreatment, MatchSet,
};
use crate::imu::{propagate_jacobians, propagate_state, ImuNoise, ImuSample, ImuState, Matrix15, PropagationSegment};
use crate::local::{local_measurement, FeatureTrack};
use crate::state::{augment_clone, marginalize_clone, propagate_covariance, BlockCovariance, StateVector};
use crate::update::{chi2_gate, compress, gated_schmidt_update, schmidt_update, Measurement, UpdateOutcome};

/// Which map information the filter uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Visual-inertial odometry only; matches are ignored.
    Odometry,
    /// One matched keyframe per match event.
    Sm,
    /// Several matched keyframes per match event.
    Mm,
    /// Several matched keyframes, map treated as exact.
    Mapconst,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Odometry, Mode::Sm, Mode::Mm, Mode::Mapconst];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Odometry => "odometry",
            Mode::Sm => "sm",
            Mode::Mm => "mm",
            Mode::Mapconst => "mapconst",
        }
    }

    /// Number of matched keyframes this mode may use, given the configured
    /// maximum.
    pub fn match_keyframe_cap(&self, max: usize) -> usize {
        match self {
            Mode::Sm => 1,
            _ => max,
        }
    }

    pub fn treatment(&self) -> MapTreatment {
        match self {
            Mode::Mapconst => MapTreatment::Constant,
            _ => MapTreatment::Consistent,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

/// One standard deviation per IMU error block, used for the initial covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSigma {
    pub rot: f64,
    pub pos: f64,
    pub vel: f64,
    pub bg: f64,
    pub ba: f64,
}

impl Default for InitialSigma {
    fn default() -> Self {
        Self { rot: 1e-3, pos: 1e-3, vel: 1e-2, bg: 1e-3, ba: 2e-2 }
    }
}

impl InitialSigma {
    pub fn covariance(&self) -> Matrix15 {
        let mut p = Matrix15::zeros();
        for (k, s) in [self.rot, self.pos, self.vel, self.bg, self.ba].iter().enumerate() {
            for i in 0..3 {
                p[(3 * k + i, 3 * k + i)] = s * s;
            }
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Sliding-window size in clones.
    pub window: usize,
    pub sigma_px: f64,
    pub imu_noise: ImuNoise,
    pub gravity: [f64; 3],
    pub init_sigma: InitialSigma,
    /// Cap on stacked local rows per update before compression.
    pub max_update_rows: usize,
    pub relin_threshold_px: f64,
    pub ransac_iterations: usize,
    pub ransac_threshold_px: f64,
    /// Scale on the PnP standard deviation when initializing `x_t`.
    pub init_inflation: f64,
    /// Keyframes used per match event when several are available.
    pub max_match_keyframes: usize,
    /// Minimum matched landmarks needed to use a match event.
    pub min_match_landmarks: usize,
    /// Also output the global 6-dof pose covariance, for pose NEES.
    pub pose_nees: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma_px: 1.0,
            imu_noise: ImuNoise::default(),
            gravity: [0.0, 0.0, -9.81],
            init_sigma: InitialSigma::default(),
            max_update_rows: 1500,
            relin_threshold_px: crate::global::DEFAULT_RELIN_THRESHOLD_PX,
            ransac_iterations: 64,
            ransac_threshold_px: 8.0,
            init_inflation: 2.0,
            max_match_keyframes: 3,
            min_match_landmarks: 6,
            pose_nees: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        self.imu_noise.validate()?;
        if self.window < 2 {
            return Err(Error::Config("window must hold at least two clones".into()));
        }
        if !(self.sigma_px > 0.0) {
            return Err(Error::Config("sigma_px must be positive".into()));
        }
        if !(self.init_inflation > 0.0) {
            return Err(Error::Config("init_inflation must be positive".into()));
        }
        if self.max_match_keyframes == 0 || self.max_update_rows == 0 {
            return Err(Error::Config("caps must be positive".into()));
        }
        Ok(())
    }
}

/// Counters accumulated over a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub frames: usize,
    pub local_updates: usize,
    pub local_features: usize,
    pub local_gated_out: usize,
    pub match_events: usize,
    pub global_applied: usize,
    pub global_rejected: usize,
    pub global_skipped: usize,
    pub relinearizations: usize,
    pub init_time: Option<f64>,
}

/// Per-frame estimator output.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub t: f64,
    /// `ᴸT_I`.
    pub local: Pose,
    /// `ᴳT_L`, once initialized.
    pub rel_transform: Option<Pose>,
    /// Marginal covariance of `x_t`.
    pub rel_cov: Option<Matrix6<f64>>,
    /// Covariance of `ᴸp_I`.
    pub local_pos_cov: Matrix3<f64>,
    /// Covariance of the global position `ᴳp_I` (requires `x_t`).
    pub global_pos_cov: Option<Matrix3<f64>>,
    /// Covariance of `ᴳT_I` in `(δθ, δp)`, only with `pose_nees`.
    pub global_pose_cov: Option<Matrix6<f64>>,
    /// Seconds spent in the global update this frame, if one ran.
    pub global_update_secs: Option<f64>,
}

impl FrameOutput {
    /// `ᴳp_I`, using `fallback` for `ᴳT_L` before initialization.
    pub fn global_position(&self, fallback: &Pose) -> Vector3<f64> {
        self.rel_transform.unwrap_or(*fallback).transform_point(&self.local.trans)
    }

    /// `ᴳT_I`, once `x_t` is initialized.
    pub fn global_pose(&self) -> Option<Pose> {
        self.rel_transform.map(|xt| xt.compose(&self.local))
    }
}

pub struct Filter {
    cfg: FilterConfig,
    mode: Mode,
    relin: bool,
    cam: PinholeCamera,
    gravity: Vector3<f64>,
    pub state: StateVector,
    pub cov: BlockCovariance,
    t: f64,
    last_sample: Option<ImuSample>,
    segment: PropagationSegment,
    tracks: BTreeMap<u64, FeatureTrack>,
    pub stats: FilterStats,
}

impl Filter {
    pub fn new(cfg: FilterConfig, mode: Mode, relin: bool, cam: PinholeCamera, x0: ImuState, t0: f64) -> Result<Self> {
        cfg.validate()?;
        if !x0.is_finite() {
            return Err(Error::NonFinite("initial state"));
        }
        let p0 = cfg.init_sigma.covariance();
        Ok(Self {
            gravity: Vector3::from(cfg.gravity),
            state: StateVector::new(x0, cfg.window + 1),
            cov: BlockCovariance::new_imu(&p0),
            t: t0,
            last_sample: None,
            segment: PropagationSegment::default(),
            tracks: BTreeMap::new(),
            stats: FilterStats::default(),
            cfg,
            mode,
            relin,
            cam,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Integrates up to the sample's timestamp using the midpoint of the
    /// previous and current readings.
    pub fn feed_imu(&mut self, s: &ImuSample) -> Result<()> {
        let Some(prev) = self.last_sample.replace(*s) else {
            if (s.t - self.t).abs() > 1e-9 {
                return Err(Error::InvalidTimeStep(s.t - self.t));
            }
            return Ok(());
        };
        let dt = s.t - prev.t;
        let mid = ImuSample::midpoint(&prev, s);
        let (phi, g) = propagate_jacobians(&self.state.imu, &mid, dt)?;
        self.state.imu = propagate_state(&self.state.imu, &mid, dt, &self.gravity)?;
        self.segment.push(&phi, &g, &self.cfg.imu_noise.discrete(dt));
        self.t = s.t;
        Ok(())
    }

    /// Handles one camera frame at the current filter time.
    pub fn process_frame(
        &mut self,
        t: f64,
        obs: &[(u64, Vector2<f64>)],
        matches: Option<&MatchSet>,
        map: Option<&Map>,
    ) -> Result<FrameOutput> {
        if (t - self.t).abs() > 1e-9 {
            return Err(Error::InvalidTimeStep(t - self.t));
        }
        self.stats.frames += 1;
        let seg = std::mem::take(&mut self.segment);
        if !seg.is_identity() {
            propagate_covariance(&mut self.cov, &seg.phi, &seg.q)?;
        }
        augment_clone(&mut self.state, &mut self.cov, t)?;

        for (id, z) in obs {
            self.tracks.entry(*id).or_insert_with(|| FeatureTrack::new(*id)).obs.push((t, *z));
        }
        let oldest = self.state.clones()[0].t;
        let slide = self.state.clones().len() > self.cfg.window;
        let done: Vec<u64> = self
            .tracks
            .iter()
            .filter(|(_, tr)| tr.obs.last().map(|o| o.0) != Some(t) || (slide && tr.obs[0].0 == oldest))
            .map(|(id, _)| *id)
            .collect();
        let finished: Vec<FeatureTrack> = done.iter().filter_map(|id| self.tracks.remove(id)).collect();
        self.local_update(&finished);
        if slide {
            marginalize_clone(&mut self.state, &mut self.cov, oldest)?;
        }

        let mut global_update_secs = None;
        if let (Some(m), Some(map)) = (matches, map) {
            if self.mode != Mode::Odometry && m.t == t {
                let start = Instant::now();
                self.global_update(m, map)?;
                global_update_secs = Some(start.elapsed().as_secs_f64());
            }
        }
        if !self.cov.is_finite() || !self.state.imu.is_finite() {
            return Err(Error::NonFinite("filter state"));
        }
        Ok(self.output(t, global_update_secs))
    }

    fn local_update(&mut self, tracks: &[FeatureTrack]) {
        let mut stacked: Option<Measurement> = None;
        for tr in tracks.iter().filter(|tr| tr.len() >= 2) {
            let Some(meas) = local_measurement(tr, &self.state, &self.cam, self.cfg.sigma_px) else { continue };
            if !chi2_gate(&self.cov, &meas) {
                self.stats.local_gated_out += 1;
                continue;
            }
            self.stats.local_features += 1;
            match stacked.as_mut() {
                None => stacked = Some(meas),
                Some(s) => {
                    if s.rows() + meas.rows() > self.cfg.max_update_rows {
                        break;
                    }
                    s.stack(&meas)
                }
            }
        }
        if let Some(mut meas) = stacked {
            compress(&mut meas);
            if schmidt_update(&mut self.state, &mut self.cov, &meas).applied() {
                self.stats.local_updates += 1;
            }
        }
    }

    /// Keyframe cap for the current mode.
    pub fn match_keyframe_cap(&self) -> usize {
        self.mode.match_keyframe_cap(self.cfg.max_match_keyframes)
    }

    fn global_update(&mut self, raw: &MatchSet, map: &Map) -> Result<()> {
        let m = restrict_matches(raw, map, self.match_keyframe_cap())?;
        if m.pairs.len() < self.cfg.min_match_landmarks {
            return Ok(());
        }
        self.stats.match_events += 1;
        let ransac = RansacConfig {
            max_iterations: self.cfg.ransac_iterations,
            threshold_px: self.cfg.ransac_threshold_px,
            seed: raw.t.to_bits(),
        };
        if self.state.rel_transform().is_none() {
            // The initializing match is spent on x_t and not reused as an
            // update.
            match initialize_global(
                &mut self.state,
                &mut self.cov,
                &m,
                map,
                &self.cam,
                &ransac,
                self.cfg.sigma_px,
                self.cfg.init_inflation,
            ) {
                Ok(xt) => {
                    info!("global frame initialized at t = {:.2}: {:?}", m.t, xt.trans);
                    self.stats.init_time = Some(m.t);
                }
                Err(e) => debug!("initialization deferred: {e}"),
            }
            return Ok(());
        }
        let treatment = self.mode.treatment();
        if treatment == MapTreatment::Consistent {
            augment_match_keyframes(&mut self.state, &mut self.cov, &m, map)?;
        }
        let lin = if self.relin {
            relinearize(&self.state, &m, map, &self.cam, treatment, self.cfg.relin_threshold_px, &ransac)?
        } else {
            None
        };
        if lin.is_some() {
            self.stats.relinearizations += 1;
        }
        let Some(mut res) =
            build_global_residual(&self.state, &m, map, &self.cam, treatment, self.cfg.sigma_px, lin.as_ref())?
        else {
            return Ok(());
        };
        compress(&mut res.meas);
        match gated_schmidt_update(&mut self.state, &mut self.cov, &res.meas) {
            UpdateOutcome::Applied { .. } => self.stats.global_applied += 1,
            UpdateOutcome::Rejected { chi2, threshold } => {
                debug!("global update at t = {:.2} gated out: {chi2:.1} ≥ {threshold:.1}", m.t);
                self.stats.global_rejected += 1;
            }
            UpdateOutcome::Skipped(_) => self.stats.global_skipped += 1,
        }
        Ok(())
    }

    fn output(&self, t: f64, global_update_secs: Option<f64>) -> FrameOutput {
        let local = self.state.imu.pose();
        let local_pos_cov: Matrix3<f64> = self.cov.aa.fixed_view::<3, 3>(3, 3).into_owned();
        let (rel_cov, global_pos_cov) = match self.state.rel_offset() {
            Some(off) => {
                let rel: Matrix6<f64> = self.cov.aa.fixed_view::<6, 6>(off, off).into_owned();
                (Some(rel), Some(self.global_position_cov(off)))
            }
            None => (None, None),
        };
        FrameOutput {
            t,
            local,
            rel_transform: self.state.rel_transform().copied(),
            rel_cov,
            local_pos_cov,
            global_pos_cov,
            global_pose_cov: match self.state.rel_offset() {
                Some(off) if self.cfg.pose_nees => Some(self.global_pose_cov(off)),
                _ => None,
            },
            global_update_secs,
        }
    }

    /// `J·P·Jᵀ` for `ᴳp_I = ᴸR_Gᵀ·ᴸp_I + ᴳp_L`.
    fn global_position_cov(&self, t_off: usize) -> Matrix3<f64> {
        let xt = self.state.rel_transform().unwrap();
        let rt = xt.rot_mat().transpose();
        let a = self.state.active_dim();
        let mut j = nalgebra::DMatrix::zeros(3, a);
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&rt);
        j.fixed_view_mut::<3, 3>(0, t_off).copy_from(&(-rt * skew(&self.state.imu.p)));
        j.fixed_view_mut::<3, 3>(0, t_off + 3).copy_from(&Matrix3::identity());
        let idx = [3, 4, 5, t_off, t_off + 1, t_off + 2, t_off + 3, t_off + 4, t_off + 5];
        let js = j.select_columns(&idx);
        let ps = self.cov.aa.select_rows(&idx).select_columns(&idx);
        let out = &js * ps * js.transpose();
        Matrix3::from_iterator(out.iter().copied())
    }

    /// `J·P·Jᵀ` for `ᴳT_I = x_t ∘ ᴸT_I`.
    fn global_pose_cov(&self, t_off: usize) -> Matrix6<f64> {
        let xt = self.state.rel_transform().unwrap();
        let (j_t, j_i) = Pose::compose_jacobians(xt, &self.state.imu.pose());
        let mut j = nalgebra::SMatrix::<f64, 6, 12>::zeros();
        j.fixed_view_mut::<6, 6>(0, 0).copy_from(&j_i);
        j.fixed_view_mut::<6, 6>(0, 6).copy_from(&j_t);
        let idx: Vec<usize> = (0..6).chain(t_off..t_off + 6).collect();
        let ps = self.cov.aa.select_rows(&idx).select_columns(&idx);
        let ps = nalgebra::SMatrix::<f64, 12, 12>::from_iterator(ps.iter().copied());
        j * ps * j.transpose()
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    /// Number of feature tracks currently open.
    pub fn open_tracks(&self) -> usize {
        self.tracks.len()
    }
}
