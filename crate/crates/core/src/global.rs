//! Map-based constraints: the prior keyframe map, 3D-2D match sets, the
//! global frame initialization, reprojection residuals against map
//! landmarks, and re-linearization of `x_t` after large drift.
//!
//! A matched landmark `f`, stored in the frame of its anchor keyframe `a`,
//! yields up to three kinds of observation:
//!
//! ```text
//! query image    z¹ = π(ᶜT_I · ᴵT_L · ᴸT_G · ᴳT_a · ᵃp_f)
//! anchor image   z² = π(ᵃp_f)
//! other kf b     z³ = π(ᵇT_G · ᴳT_a · ᵃp_f)
//! ```
//!
//! The landmark error is eliminated by projecting onto the left null space
//! of its Jacobian, so map uncertainty enters only through `x_N` and the
//! pixel noise.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::epnp::{epnp_ransac, RansacConfig};
use crate::error::{Error, Result};
use crate::geometry::{skew, PinholeCamera, Pose};
use crate::state::{
    augment_keyframes, init_rel_transform_from_clone, BlockCovariance, KeyframeId, StateVector, POSE_DIM,
};
use crate::update::{nullspace_project, Measurement};

/// Default mean reprojection error (pixels) that triggers re-linearization.
pub const DEFAULT_RELIN_THRESHOLD_PX: f64 = 20.0;

/// A prior-map keyframe. `pose` is `ᴳT_kf` of the keyframe camera.
#[derive(Clone, Debug, PartialEq)]
pub struct MapKeyframe {
    pub id: KeyframeId,
    pub pose: Pose,
    pub cov: Matrix6<f64>,
}

/// A map point in the camera frame of its anchor keyframe, with the pixel at
/// which the anchor observed it.
#[derive(Clone, Debug, PartialEq)]
pub struct MapLandmark {
    pub id: u64,
    pub anchor: KeyframeId,
    pub p: Vector3<f64>,
    pub anchor_px: Vector2<f64>,
}

/// Keyframe map. All keyframes share one camera with identity extrinsic.
#[derive(Clone, Debug)]
pub struct Map {
    pub camera: PinholeCamera,
    keyframes: Vec<MapKeyframe>,
    landmarks: Vec<MapLandmark>,
    kf_index: HashMap<KeyframeId, usize>,
    lm_index: HashMap<u64, usize>,
}

impl Map {
    pub fn new(camera: PinholeCamera, keyframes: Vec<MapKeyframe>, landmarks: Vec<MapLandmark>) -> Result<Self> {
        let camera = camera.with_extrinsic(Pose::identity());
        let kf_index: HashMap<_, _> = keyframes.iter().enumerate().map(|(i, k)| (k.id, i)).collect();
        let lm_index: HashMap<_, _> = landmarks.iter().enumerate().map(|(i, l)| (l.id, i)).collect();
        if kf_index.len() != keyframes.len() || lm_index.len() != landmarks.len() {
            return Err(Error::Config("duplicate map ids".into()));
        }
        if let Some(l) = landmarks.iter().find(|l| !kf_index.contains_key(&l.anchor)) {
            return Err(Error::UnknownKeyframe(l.anchor));
        }
        Ok(Self { camera, keyframes, landmarks, kf_index, lm_index })
    }

    pub fn keyframes(&self) -> &[MapKeyframe] {
        &self.keyframes
    }

    pub fn landmarks(&self) -> &[MapLandmark] {
        &self.landmarks
    }

    pub fn keyframe(&self, id: KeyframeId) -> Result<&MapKeyframe> {
        self.kf_index.get(&id).map(|i| &self.keyframes[*i]).ok_or(Error::UnknownKeyframe(id))
    }

    pub fn landmark(&self, id: u64) -> Result<&MapLandmark> {
        self.lm_index.get(&id).map(|i| &self.landmarks[*i]).ok_or(Error::UnknownLandmark(id))
    }
}

/// One matched landmark: its query-image pixel and the pixels at which other
/// matched keyframes (besides its anchor) see it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub landmark: u64,
    pub query_px: [f64; 2],
    pub observers: Vec<(KeyframeId, [f64; 2])>,
}

/// 3D-2D matches between the image at `t` and the map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub t: f64,
    pub keyframes: Vec<KeyframeId>,
    pub pairs: Vec<MatchPair>,
}

impl MatchSet {
    /// Every keyframe whose pose enters the residual: matched keyframes and
    /// landmark anchors, in first-seen order.
    pub fn involved_keyframes(&self, map: &Map) -> Result<Vec<KeyframeId>> {
        let mut out = self.keyframes.clone();
        for p in &self.pairs {
            let a = map.landmark(p.landmark)?.anchor;
            for id in std::iter::once(a).chain(p.observers.iter().map(|o| o.0)) {
                if !out.contains(&id) {
                    out.push(id);
                }
            }
        }
        Ok(out)
    }
}

/// Keeps the first `max_keyframes` matched keyframes, the pairs anchored in
/// them, and only their observers.
pub fn restrict_matches(m: &MatchSet, map: &Map, max_keyframes: usize) -> Result<MatchSet> {
    let kfs: Vec<KeyframeId> = m.keyframes.iter().take(max_keyframes).copied().collect();
    let mut pairs = Vec::new();
    for p in &m.pairs {
        if !kfs.contains(&map.landmark(p.landmark)?.anchor) {
            continue;
        }
        let mut p = p.clone();
        p.observers.retain(|o| kfs.contains(&o.0));
        pairs.push(p);
    }
    Ok(MatchSet { t: m.t, keyframes: kfs, pairs })
}

/// How map uncertainty is treated when forming a residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapTreatment {
    /// Keyframe poses are Schmidt nuisance states and landmarks are
    /// eliminated by null-space projection.
    Consistent,
    /// Keyframe poses and landmarks are exact constants.
    Constant,
}

/// Stacked, landmark-free global constraint.
#[derive(Clone, Debug)]
pub struct GlobalResidual {
    pub meas: Measurement,
    pub landmarks_used: usize,
    pub landmarks_dropped: usize,
    pub raw_rows: usize,
}

fn query_camera_pose(state: &StateVector, t: f64, cam: &PinholeCamera) -> Result<Pose> {
    let slot = state.clone_slot(t).ok_or(Error::UnknownClone(t))?;
    Ok(state.clones()[slot].pose.compose(&cam.extrinsic))
}

fn keyframe_pose(state: &StateVector, map: &Map, id: KeyframeId, treatment: MapTreatment) -> Result<Pose> {
    match treatment {
        MapTreatment::Consistent => state.keyframe_pose(id).copied().ok_or(Error::UnknownKeyframe(id)),
        MapTreatment::Constant => Ok(map.keyframe(id)?.pose),
    }
}

/// Mean query-image reprojection error of the matched landmarks through the
/// current estimates, or `None` if none projects.
pub fn mean_reprojection_error(
    state: &StateVector,
    m: &MatchSet,
    map: &Map,
    cam: &PinholeCamera,
    treatment: MapTreatment,
) -> Result<Option<f64>> {
    let xt = state.rel_transform().ok_or(Error::NotInitialized)?;
    let slot = state.clone_slot(m.t).ok_or(Error::UnknownClone(m.t))?;
    let clone = state.clones()[slot].pose;
    let mut sum = 0.0;
    let mut n = 0usize;
    for pair in &m.pairs {
        let lm = map.landmark(pair.landmark)?;
        let kf = keyframe_pose(state, map, lm.anchor, treatment)?;
        let p_g = kf.transform_point(&lm.p);
        let p_c =
            cam.extrinsic.inverse_transform_point(&clone.inverse_transform_point(&xt.inverse_transform_point(&p_g)));
        if let Some(h) = cam.project(&p_c) {
            sum += (Vector2::from(pair.query_px) - h).norm();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Camera pose `ᴳT_C` of the query image from a robust PnP against the
/// matched landmarks, solved in the frame of the first matched keyframe.
/// Also returns the pose covariance: the PnP part, with the pixel variance
/// estimated from the residuals but not below `min_sigma_px²`, plus the
/// stored covariance of the reference keyframe.
fn query_pose_from_pnp(
    state: &StateVector,
    m: &MatchSet,
    map: &Map,
    cam: &PinholeCamera,
    treatment: MapTreatment,
    ransac: &RansacConfig,
    min_sigma_px: f64,
) -> Result<(Pose, Option<Matrix6<f64>>)> {
    let ref_id = *m.keyframes.first().ok_or_else(|| Error::Pnp("match without keyframes".into()))?;
    let ref_pose = keyframe_pose(state, map, ref_id, treatment)?;
    let mut pts = Vec::with_capacity(m.pairs.len());
    let mut px = Vec::with_capacity(m.pairs.len());
    for pair in &m.pairs {
        let lm = map.landmark(pair.landmark)?;
        let kf = keyframe_pose(state, map, lm.anchor, treatment)?;
        pts.push(ref_pose.inverse_transform_point(&kf.transform_point(&lm.p)));
        px.push(Vector2::from(pair.query_px));
    }
    let sol = epnp_ransac(&pts, &px, cam, ransac)?;
    let g_t_c = ref_pose.compose(&sol.pose);
    let (j_kf, j) = Pose::compose_jacobians(&ref_pose, &sol.pose);
    let kf_cov = map.keyframe(ref_id)?.cov;
    let cov = sol.covariance(min_sigma_px).map(|c| j * c * j.transpose() + j_kf * kf_cov * j_kf.transpose());
    Ok((g_t_c, cov))
}

/// `ᴳT_L = ᴳT_C · (ᴸT_C)⁻¹` for the query image at `m.t`.
pub fn frame_offset_from_pnp(
    state: &StateVector,
    m: &MatchSet,
    map: &Map,
    cam: &PinholeCamera,
    treatment: MapTreatment,
    ransac: &RansacConfig,
) -> Result<Pose> {
    let (g_t_c, _) = query_pose_from_pnp(state, m, map, cam, treatment, ransac, 0.0)?;
    let l_t_c = query_camera_pose(state, m.t, cam)?;
    Ok(g_t_c.compose(&l_t_c.inverse()))
}

/// Initializes `x_t` from the first usable match by PnP against the map.
///
/// With `ᴳT_I = ᴳT_C ∘ ᶜT_I` from PnP and the clone `ᴸT_I` at `m.t`,
/// `x_t = ᴳT_I ∘ (ᴸT_I)⁻¹`. Its covariance is the clone's, carried through
/// that map with the exact cross-covariance, plus the PnP covariance scaled
/// by `inflation²`. The map keyframes are not in the state yet, so their
/// share of the PnP covariance enters as uncorrelated noise.
#[allow(clippy::too_many_arguments)]
pub fn initialize_global(
    state: &mut StateVector,
    cov: &mut BlockCovariance,
    m: &MatchSet,
    map: &Map,
    cam: &PinholeCamera,
    ransac: &RansacConfig,
    min_sigma_px: f64,
    inflation: f64,
) -> Result<Pose> {
    if state.rel_transform().is_some() {
        return Err(Error::AlreadyInitialized);
    }
    let slot = state.clone_slot(m.t).ok_or(Error::UnknownClone(m.t))?;
    let (g_t_c, cov_c) = query_pose_from_pnp(state, m, map, cam, MapTreatment::Constant, ransac, min_sigma_px)?;
    let cov_c = cov_c.ok_or_else(|| Error::Pnp("degenerate PnP information".into()))?;
    let c_t_i = cam.extrinsic.inverse();
    let g_t_i = g_t_c.compose(&c_t_i);
    let l_t_i = state.clones()[slot].pose;
    let i_t_l = l_t_i.inverse();
    let xt = g_t_i.compose(&i_t_l);
    let (j_ci, _) = Pose::compose_jacobians(&g_t_c, &c_t_i);
    let (j_gi, j_il) = Pose::compose_jacobians(&g_t_i, &i_t_l);
    let j_pnp = j_gi * j_ci;
    let j_clone = j_il * l_t_i.inverse_jacobian();
    let noise = j_pnp * cov_c * j_pnp.transpose() * (inflation * inflation);
    init_rel_transform_from_clone(state, cov, xt, slot, &j_clone, &noise)?;
    Ok(xt)
}

/// Linearization point for `x_t` when the current estimate reprojects the
/// matches worse than `threshold_px` on average. `None` means keep the
/// current estimate.
pub fn relinearize(
    state: &StateVector,
    m: &MatchSet,
    map: &Map,
    cam: &PinholeCamera,
    treatment: MapTreatment,
    threshold_px: f64,
    ransac: &RansacConfig,
) -> Result<Option<Pose>> {
    match mean_reprojection_error(state, m, map, cam, treatment)? {
        Some(e) if e <= threshold_px => return Ok(None),
        _ => {}
    }
    match frame_offset_from_pnp(state, m, map, cam, treatment, ransac) {
        Ok(p) => Ok(Some(p)),
        Err(e) => {
            log::debug!("re-linearization skipped: {e}");
            Ok(None)
        }
    }
}

/// Adds every keyframe the match touches to the nuisance state.
pub fn augment_match_keyframes(
    state: &mut StateVector,
    cov: &mut BlockCovariance,
    m: &MatchSet,
    map: &Map,
) -> Result<usize> {
    let ids = m.involved_keyframes(map)?;
    let kfs: Vec<&MapKeyframe> = ids.iter().map(|id| map.keyframe(*id)).collect::<Result<_>>()?;
    Ok(augment_keyframes(state, cov, kfs.iter().map(|k| (k.id, &k.pose, &k.cov))))
}

fn pose_block(j: &Matrix2x3<f64>, p_b: &Vector3<f64>, r_ba: &Matrix3<f64>) -> [Matrix2x3<f64>; 2] {
    [j * skew(p_b), -j * r_ba]
}

/// Everything a landmark's rows depend on besides the landmark itself.
struct Linearization<'a> {
    state: &'a StateVector,
    map: &'a Map,
    cam: &'a PinholeCamera,
    treatment: MapTreatment,
    clone: Pose,
    c_off: usize,
    xt: Pose,
    t_off: usize,
    /// `x̂_t ⊟ x̄_t` when linearizing away from the estimate.
    shift: Option<nalgebra::Vector6<f64>>,
    involved: Vec<KeyframeId>,
}

/// Unprojected rows of one landmark. `hn` has six columns per involved
/// keyframe.
struct LandmarkRows {
    r: DVector<f64>,
    ha: DMatrix<f64>,
    hn: DMatrix<f64>,
    hf: DMatrix<f64>,
}

impl<'a> Linearization<'a> {
    fn new(
        state: &'a StateVector,
        m: &MatchSet,
        map: &'a Map,
        cam: &'a PinholeCamera,
        treatment: MapTreatment,
        lin_point: Option<&Pose>,
    ) -> Result<Self> {
        let xt_hat = *state.rel_transform().ok_or(Error::NotInitialized)?;
        let xt = *lin_point.unwrap_or(&xt_hat);
        let slot = state.clone_slot(m.t).ok_or(Error::UnknownClone(m.t))?;
        let involved = match treatment {
            MapTreatment::Consistent => m.involved_keyframes(map)?,
            MapTreatment::Constant => Vec::new(),
        };
        for id in &involved {
            state.keyframe_slot(*id).ok_or(Error::UnknownKeyframe(*id))?;
        }
        Ok(Self {
            state,
            map,
            cam,
            treatment,
            clone: state.clones()[slot].pose,
            c_off: state.clone_offset(slot),
            xt,
            t_off: state.rel_offset().unwrap(),
            shift: lin_point.map(|_| xt_hat.lift(&xt)),
            involved,
        })
    }

    fn slots(&self) -> Vec<usize> {
        self.involved.iter().map(|id| self.state.keyframe_slot(*id).unwrap()).collect()
    }

    fn compact(&self, id: KeyframeId) -> usize {
        POSE_DIM * self.involved.iter().position(|k| *k == id).unwrap()
    }

    /// Residual rows at the linearization point; see `shifted`.
    /// `None` when the landmark falls behind any involved camera.
    fn rows(&self, pair: &MatchPair, lm: &MapLandmark, p_a: &Vector3<f64>) -> Result<Option<LandmarkRows>> {
        let consistent = self.treatment == MapTreatment::Consistent;
        let kcam = &self.map.camera;
        let kf_a = keyframe_pose(self.state, self.map, lm.anchor, self.treatment)?;
        let observers: Vec<(KeyframeId, Vector2<f64>)> = if consistent {
            pair.observers.iter().filter(|o| o.0 != lm.anchor).map(|(id, z)| (*id, Vector2::from(*z))).collect()
        } else {
            Vec::new()
        };
        let m_rows = if consistent { 2 * (2 + observers.len()) } else { 2 };
        let mut out = LandmarkRows {
            r: DVector::zeros(m_rows),
            ha: DMatrix::zeros(m_rows, self.state.active_dim()),
            hn: DMatrix::zeros(m_rows, POSE_DIM * self.involved.len()),
            hf: DMatrix::zeros(m_rows, 3),
        };

        // Query image.
        let r_ag = kf_a.rot_mat();
        let r_il = self.clone.rot_mat();
        let r_lg = self.xt.rot_mat();
        let p_g = kf_a.transform_point(p_a);
        let p_l = self.xt.inverse_transform_point(&p_g);
        let p_i = self.clone.inverse_transform_point(&p_l);
        let p_c = self.cam.extrinsic.inverse_transform_point(&p_i);
        let Some(h1) = self.cam.project(&p_c) else { return Ok(None) };
        let j1 = self.cam.project_jacobian(&p_c) * self.cam.extrinsic.rot_mat();
        let j2 = j1 * r_il;
        let j3 = j2 * r_lg;
        out.r.fixed_rows_mut::<2>(0).copy_from(&(Vector2::from(pair.query_px) - h1));
        let [a, b] = pose_block(&j1, &p_i, &r_il);
        out.ha.fixed_view_mut::<2, 3>(0, self.c_off).copy_from(&a);
        out.ha.fixed_view_mut::<2, 3>(0, self.c_off + 3).copy_from(&b);
        let [a, b] = pose_block(&j2, &p_l, &r_lg);
        out.ha.fixed_view_mut::<2, 3>(0, self.t_off).copy_from(&a);
        out.ha.fixed_view_mut::<2, 3>(0, self.t_off + 3).copy_from(&b);
        if !consistent {
            return Ok(Some(out));
        }
        let ca = self.compact(lm.anchor);
        out.hn.fixed_view_mut::<2, 3>(0, ca).copy_from(&(-j3 * r_ag.transpose() * skew(p_a)));
        out.hn.fixed_view_mut::<2, 3>(0, ca + 3).copy_from(&j3);
        out.hf.fixed_view_mut::<2, 3>(0, 0).copy_from(&(j3 * r_ag.transpose()));

        // Anchor image.
        let Some(h2) = kcam.project(p_a) else { return Ok(None) };
        out.r.fixed_rows_mut::<2>(2).copy_from(&(lm.anchor_px - h2));
        out.hf.fixed_view_mut::<2, 3>(2, 0).copy_from(&kcam.project_jacobian(p_a));

        // Other matched keyframes.
        for (k, (id, z)) in observers.iter().enumerate() {
            let kf_b = keyframe_pose(self.state, self.map, *id, self.treatment)?;
            let r_bg = kf_b.rot_mat();
            let p_b = kf_b.inverse_transform_point(&p_g);
            let Some(h3) = kcam.project(&p_b) else { return Ok(None) };
            let row = 4 + 2 * k;
            let jb = kcam.project_jacobian(&p_b);
            out.r.fixed_rows_mut::<2>(row).copy_from(&(z - h3));
            let cb = self.compact(*id);
            let [a, b] = pose_block(&jb, &p_b, &r_bg);
            out.hn.fixed_view_mut::<2, 3>(row, cb).copy_from(&a);
            out.hn.fixed_view_mut::<2, 3>(row, cb + 3).copy_from(&b);
            let jba = jb * r_bg * r_ag.transpose();
            out.hn.fixed_view_mut::<2, 3>(row, ca).copy_from(&(-jba * skew(p_a)));
            out.hn.fixed_view_mut::<2, 3>(row, ca + 3).copy_from(&(jb * r_bg));
            out.hf.fixed_view_mut::<2, 3>(row, 0).copy_from(&jba);
        }
        Ok(Some(out))
    }

    /// Moves the query residual from `x̄_t` back onto the estimate.
    fn shifted(&self, mut rows: LandmarkRows) -> LandmarkRows {
        if let Some(shift) = self.shift {
            let corr = rows.ha.fixed_view::<2, 6>(0, self.t_off) * shift;
            let cur = rows.r.fixed_rows::<2>(0) - corr;
            rows.r.fixed_rows_mut::<2>(0).copy_from(&cur);
        }
        rows
    }
}

/// Stacked global residual for one match set.
///
/// With `lin_point = Some(x̄_t)` the observation model is evaluated at `x̄_t`
/// and the residual is shifted by `H_t·(x̂_t ⊟ x̄_t)`, so it still measures the
/// error of the current estimate.
pub fn build_global_residual(
    state: &StateVector,
    m: &MatchSet,
    map: &Map,
    cam: &PinholeCamera,
    treatment: MapTreatment,
    sigma_px: f64,
    lin_point: Option<&Pose>,
) -> Result<Option<GlobalResidual>> {
    let lin = Linearization::new(state, m, map, cam, treatment, lin_point)?;
    let a_dim = state.active_dim();
    let n_cols = POSE_DIM * lin.involved.len();
    let mut blocks: Vec<(DVector<f64>, DMatrix<f64>)> = Vec::new();
    let (mut used, mut dropped, mut raw_rows) = (0, 0, 0);
    for pair in &m.pairs {
        let lm = map.landmark(pair.landmark)?;
        let Some(rows) = lin.rows(pair, lm, &lm.p)? else {
            dropped += 1;
            continue;
        };
        let rows = lin.shifted(rows);
        used += 1;
        raw_rows += rows.r.len();
        let mut hx = DMatrix::zeros(rows.r.len(), a_dim + n_cols);
        hx.columns_mut(0, a_dim).copy_from(&rows.ha);
        hx.columns_mut(a_dim, n_cols).copy_from(&rows.hn);
        match treatment {
            MapTreatment::Consistent => {
                let proj = nullspace_project(&rows.r, &hx, &rows.hf);
                blocks.push((proj.r, proj.h));
            }
            MapTreatment::Constant => blocks.push((rows.r, hx)),
        }
    }
    let total: usize = blocks.iter().map(|b| b.0.len()).sum();
    if total == 0 {
        return Ok(None);
    }
    let mut r = DVector::zeros(total);
    let mut h = DMatrix::zeros(total, a_dim + n_cols);
    let mut at = 0;
    for (br, bh) in &blocks {
        r.rows_mut(at, br.len()).copy_from(br);
        h.rows_mut(at, br.len()).copy_from(bh);
        at += br.len();
    }
    Ok(Some(GlobalResidual {
        meas: Measurement {
            r,
            h_active: h.columns(0, a_dim).into_owned(),
            h_nuisance: h.columns(a_dim, n_cols).into_owned(),
            nuisance_slots: lin.slots(),
            noise_var: sigma_px * sigma_px,
        },
        landmarks_used: used,
        landmarks_dropped: dropped,
        raw_rows,
    }))
}

/// Unprojected residual and Jacobians of one landmark, with the nuisance
/// part dense over the whole state.
#[derive(Clone, Debug)]
pub struct RawLandmarkResidual {
    pub r: DVector<f64>,
    pub h_active: DMatrix<f64>,
    pub h_nuisance: DMatrix<f64>,
    pub h_f: DMatrix<f64>,
}

/// Unprojected rows of a single matched landmark evaluated at anchored
/// position `p_a` (which may differ from the stored map value).
#[allow(clippy::too_many_arguments)]
pub fn raw_landmark_residual(
    state: &StateVector,
    m: &MatchSet,
    pair: &MatchPair,
    p_a: &Vector3<f64>,
    map: &Map,
    cam: &PinholeCamera,
    treatment: MapTreatment,
    lin_point: Option<&Pose>,
) -> Result<RawLandmarkResidual> {
    let single = MatchSet { t: m.t, keyframes: m.keyframes.clone(), pairs: vec![pair.clone()] };
    let lin = Linearization::new(state, &single, map, cam, treatment, lin_point)?;
    let lm = map.landmark(pair.landmark)?;
    let rows = lin.shifted(lin.rows(pair, lm, p_a)?.ok_or(Error::BehindCamera)?);
    let meas = Measurement {
        r: rows.r.clone(),
        h_active: rows.ha.clone(),
        h_nuisance: rows.hn,
        nuisance_slots: lin.slots(),
        noise_var: 1.0,
    };
    Ok(RawLandmarkResidual {
        h_nuisance: meas.dense_nuisance(state.nuisance_dim()),
        r: rows.r,
        h_active: rows.ha,
        h_f: rows.hf,
    })
}
