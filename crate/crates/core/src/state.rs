//! Partitioned filter state and covariance.
//!
//! Error-state layout:
//!
//! ```text
//! active   = [ IMU (15) | clone₀ (6) … clone_{c−1} (6) | x_t (6, optional) ]
//! nuisance = [ keyframe₀ (6) … keyframe_{m−1} (6) ]
//! ```
//!
//! Every 6-dof block is `(δθ, δp)`. The covariance is stored as the three
//! blocks `P_AA`, `P_AN`, `P_NN`; `P_NN` is only ever grown by keyframe
//! augmentation, never rewritten, unless a full (non-Schmidt) EKF update is
//! requested explicitly.

use std::collections::HashMap;

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::imu::{ErrorState, ImuState, Matrix15, Vector15, IMU_DIM};

pub const POSE_DIM: usize = 6;

/// Default prior for `x_t`: 1 rad² per rotation axis, 10 m² per position axis.
pub fn default_rel_transform_prior() -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::new(1.0, 1.0, 1.0, 10.0, 10.0, 10.0))
}

/// Cloned IMU pose `ᴸT_I` at a camera timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseClone {
    pub t: f64,
    pub pose: Pose,
}

pub type KeyframeId = u64;

/// Filter mean: IMU state, sliding window, `x_t = ᴳT_L`, map keyframe poses.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub imu: ImuState,
    clones: Vec<PoseClone>,
    rel_transform: Option<Pose>,
    keyframes: Vec<(KeyframeId, Pose)>,
    kf_index: HashMap<KeyframeId, usize>,
    max_clones: usize,
}

impl StateVector {
    pub fn new(imu: ImuState, max_clones: usize) -> Self {
        Self {
            imu,
            clones: Vec::new(),
            rel_transform: None,
            keyframes: Vec::new(),
            kf_index: HashMap::new(),
            max_clones,
        }
    }

    pub fn clones(&self) -> &[PoseClone] {
        &self.clones
    }

    pub fn max_clones(&self) -> usize {
        self.max_clones
    }

    pub fn rel_transform(&self) -> Option<&Pose> {
        self.rel_transform.as_ref()
    }

    pub fn keyframes(&self) -> &[(KeyframeId, Pose)] {
        &self.keyframes
    }

    pub fn keyframe_slot(&self, id: KeyframeId) -> Option<usize> {
        self.kf_index.get(&id).copied()
    }

    pub fn keyframe_pose(&self, id: KeyframeId) -> Option<&Pose> {
        self.keyframe_slot(id).map(|i| &self.keyframes[i].1)
    }

    pub fn clone_slot(&self, t: f64) -> Option<usize> {
        self.clones.iter().position(|c| c.t == t)
    }

    pub fn active_dim(&self) -> usize {
        IMU_DIM + POSE_DIM * self.clones.len() + if self.rel_transform.is_some() { POSE_DIM } else { 0 }
    }

    pub fn nuisance_dim(&self) -> usize {
        POSE_DIM * self.keyframes.len()
    }

    /// Column of clone `slot` in the active error state.
    pub fn clone_offset(&self, slot: usize) -> usize {
        IMU_DIM + POSE_DIM * slot
    }

    /// Column of `x_t` in the active error state.
    pub fn rel_offset(&self) -> Option<usize> {
        self.rel_transform.map(|_| IMU_DIM + POSE_DIM * self.clones.len())
    }

    /// Column of keyframe `slot` in the nuisance error state.
    pub fn keyframe_offset(&self, slot: usize) -> usize {
        POSE_DIM * slot
    }

    /// Applies an active error-state correction. The nuisance part is left
    /// untouched.
    pub fn retract_active(&mut self, delta: &DVector<f64>) {
        assert_eq!(delta.len(), self.active_dim());
        let imu = Vector15::from_iterator(delta.rows(0, IMU_DIM).iter().copied());
        self.imu = self.imu.retract(&ErrorState::from_vector(&imu));
        for (i, c) in self.clones.iter_mut().enumerate() {
            let d = Vector6::from_iterator(delta.rows(IMU_DIM + POSE_DIM * i, POSE_DIM).iter().copied());
            c.pose = c.pose.retract(&d);
        }
        if let Some(off) = self.rel_offset() {
            let d = Vector6::from_iterator(delta.rows(off, POSE_DIM).iter().copied());
            self.rel_transform = self.rel_transform.map(|t| t.retract(&d));
        }
    }

    /// Applies a nuisance correction. Only a full EKF update does this.
    pub fn retract_nuisance(&mut self, delta: &DVector<f64>) {
        assert_eq!(delta.len(), self.nuisance_dim());
        for (i, (_, pose)) in self.keyframes.iter_mut().enumerate() {
            let d = Vector6::from_iterator(delta.rows(POSE_DIM * i, POSE_DIM).iter().copied());
            *pose = pose.retract(&d);
        }
    }

    /// Overwrites the relative transform mean (used by tests and tools).
    pub fn set_rel_transform_mean(&mut self, pose: Pose) -> Result<()> {
        match self.rel_transform.as_mut() {
            Some(t) => {
                *t = pose;
                Ok(())
            }
            None => Err(Error::NotInitialized),
        }
    }

    /// Replaces the pose of an existing clone (used by tests).
    pub fn set_clone_pose(&mut self, slot: usize, pose: Pose) {
        self.clones[slot].pose = pose;
    }
}

/// Joint covariance stored as `P_AA`, `P_AN`, `P_NN`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCovariance {
    pub aa: DMatrix<f64>,
    pub an: DMatrix<f64>,
    pub nn: DMatrix<f64>,
}

impl BlockCovariance {
    pub fn new_imu(p: &Matrix15) -> Self {
        Self {
            aa: DMatrix::from_iterator(IMU_DIM, IMU_DIM, p.iter().copied()),
            an: DMatrix::zeros(IMU_DIM, 0),
            nn: DMatrix::zeros(0, 0),
        }
    }

    pub fn from_full(full: &DMatrix<f64>, active_dim: usize) -> Self {
        let n = full.nrows() - active_dim;
        Self {
            aa: full.view((0, 0), (active_dim, active_dim)).into_owned(),
            an: full.view((0, active_dim), (active_dim, n)).into_owned(),
            nn: full.view((active_dim, active_dim), (n, n)).into_owned(),
        }
    }

    pub fn active_dim(&self) -> usize {
        self.aa.nrows()
    }

    pub fn nuisance_dim(&self) -> usize {
        self.nn.nrows()
    }

    pub fn dim(&self) -> usize {
        self.active_dim() + self.nuisance_dim()
    }

    pub fn full(&self) -> DMatrix<f64> {
        let a = self.active_dim();
        let n = self.nuisance_dim();
        let mut p = DMatrix::zeros(a + n, a + n);
        p.view_mut((0, 0), (a, a)).copy_from(&self.aa);
        p.view_mut((0, a), (a, n)).copy_from(&self.an);
        p.view_mut((a, 0), (n, a)).copy_from(&self.an.transpose());
        p.view_mut((a, a), (n, n)).copy_from(&self.nn);
        p
    }

    pub fn symmetrize_active(&mut self) {
        symmetrize(&mut self.aa);
    }

    pub fn is_finite(&self) -> bool {
        self.aa.iter().chain(self.an.iter()).all(|v| v.is_finite())
    }

    /// Marginal covariance of the given active index ranges `(offset, len)`.
    pub fn active_marginal(&self, offset: usize, len: usize) -> DMatrix<f64> {
        self.aa.view((offset, offset), (len, len)).into_owned()
    }

    /// Rebuilds the active blocks by picking rows/columns of the old active
    /// state through `src` (`None` entries become zero rows/columns).
    fn remap_active(&mut self, src: &[Option<usize>]) {
        let a = src.len();
        let n = self.nuisance_dim();
        let mut aa = DMatrix::zeros(a, a);
        for (j, sj) in src.iter().enumerate() {
            let Some(sj) = sj else { continue };
            for (i, si) in src.iter().enumerate() {
                if let Some(si) = si {
                    aa[(i, j)] = self.aa[(*si, *sj)];
                }
            }
        }
        let mut an = DMatrix::zeros(a, n);
        for c in 0..n {
            for (i, si) in src.iter().enumerate() {
                if let Some(si) = si {
                    an[(i, c)] = self.an[(*si, c)];
                }
            }
        }
        self.aa = aa;
        self.an = an;
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest asymmetry `max |P − Pᵀ|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).abs().max()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().min()
}

/// Applies `P ← Φ P Φᵀ + Q` to the IMU block and `Φ` to the IMU rows of the
/// cross terms. Clones, `x_t` and keyframes are static during propagation.
pub fn propagate_covariance(cov: &mut BlockCovariance, phi: &Matrix15, q: &Matrix15) -> Result<()> {
    if phi.iter().chain(q.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("propagation matrices"));
    }
    let a = cov.active_dim();
    let phi_d = DMatrix::from_iterator(IMU_DIM, IMU_DIM, phi.iter().copied());
    let q_d = DMatrix::from_iterator(IMU_DIM, IMU_DIM, q.iter().copied());
    // Rows of the IMU block against everything else in the active part.
    let imu_rows = cov.aa.view((0, 0), (IMU_DIM, a)).into_owned();
    let new_rows = &phi_d * imu_rows;
    cov.aa.view_mut((0, 0), (IMU_DIM, a)).copy_from(&new_rows);
    let imu_cols = cov.aa.view((0, 0), (a, IMU_DIM)).into_owned();
    let new_cols = imu_cols * phi_d.transpose();
    cov.aa.view_mut((0, 0), (a, IMU_DIM)).copy_from(&new_cols);
    let qa = cov.aa.view((0, 0), (IMU_DIM, IMU_DIM)) + q_d;
    cov.aa.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&qa);
    if cov.nuisance_dim() > 0 {
        let an_rows = cov.an.view((0, 0), (IMU_DIM, cov.nuisance_dim())).into_owned();
        let new_an = &phi_d * an_rows;
        cov.an.view_mut((0, 0), (IMU_DIM, cov.nuisance_dim())).copy_from(&new_an);
    }
    if asymmetry(&cov.aa) > 1e-8 {
        warn!("covariance asymmetry after propagation, symmetrizing");
    }
    cov.symmetrize_active();
    if !cov.is_finite() {
        return Err(Error::NonFinite("propagated covariance"));
    }
    Ok(())
}

/// Appends a stochastic clone of the current IMU pose.
pub fn augment_clone(state: &mut StateVector, cov: &mut BlockCovariance, t: f64) -> Result<()> {
    if !state.imu.pose().is_finite() {
        return Err(Error::NonFinite("IMU pose"));
    }
    if state.clone_slot(t).is_some() {
        return Err(Error::DuplicateClone(t));
    }
    if state.clones.len() >= state.max_clones {
        return Err(Error::WindowFull(state.clones.len()));
    }
    let a = state.active_dim();
    let insert_at = IMU_DIM + POSE_DIM * state.clones.len();
    let mut src: Vec<Option<usize>> = (0..insert_at).map(Some).collect();
    src.extend((0..POSE_DIM).map(Some));
    src.extend((insert_at..a).map(Some));
    cov.remap_active(&src);
    state.clones.push(PoseClone { t, pose: state.imu.pose() });
    Ok(())
}

/// Removes a clone and its rows/columns.
pub fn marginalize_clone(state: &mut StateVector, cov: &mut BlockCovariance, t: f64) -> Result<()> {
    let slot = state.clone_slot(t).ok_or(Error::UnknownClone(t))?;
    let a = state.active_dim();
    let off = state.clone_offset(slot);
    let src: Vec<Option<usize>> = (0..a).filter(|i| *i < off || *i >= off + POSE_DIM).map(Some).collect();
    cov.remap_active(&src);
    state.clones.remove(slot);
    Ok(())
}

/// Adds `x_t = ᴳT_L` at the end of the active part with an uncorrelated prior.
pub fn init_rel_transform(
    state: &mut StateVector,
    cov: &mut BlockCovariance,
    t_init: Pose,
    prior: &Matrix6<f64>,
) -> Result<()> {
    if state.rel_transform.is_some() {
        return Err(Error::AlreadyInitialized);
    }
    if !t_init.is_finite() {
        return Err(Error::NonFinite("initial relative transform"));
    }
    let a = state.active_dim();
    let mut src: Vec<Option<usize>> = (0..a).map(Some).collect();
    src.extend([None; POSE_DIM]);
    cov.remap_active(&src);
    for j in 0..POSE_DIM {
        for i in 0..POSE_DIM {
            cov.aa[(a + i, a + j)] = prior[(i, j)];
        }
    }
    state.rel_transform = Some(t_init);
    Ok(())
}

/// Adds `x_t` as a function of clone `slot` plus independent noise,
/// `δx_t = J·δclone + n` with `n ~ N(0, noise)`, keeping the exact
/// cross-covariance with the rest of the state.
pub fn init_rel_transform_from_clone(
    state: &mut StateVector,
    cov: &mut BlockCovariance,
    t_init: Pose,
    slot: usize,
    j: &Matrix6<f64>,
    noise: &Matrix6<f64>,
) -> Result<()> {
    if slot >= state.clones.len() {
        return Err(Error::UnknownClone(f64::NAN));
    }
    let c = state.clone_offset(slot);
    init_rel_transform(state, cov, t_init, noise)?;
    let t = state.rel_offset().expect("just initialized");
    let cross = j * cov.aa.rows(c, POSE_DIM);
    let p_cc = cov.aa.view((c, c), (POSE_DIM, POSE_DIM)).into_owned();
    let block = noise + j * p_cc * j.transpose();
    cov.aa.rows_mut(t, POSE_DIM).copy_from(&cross);
    cov.aa.columns_mut(t, POSE_DIM).copy_from(&cross.transpose());
    cov.aa.view_mut((t, t), (POSE_DIM, POSE_DIM)).copy_from(&block);
    let an = j * cov.an.rows(c, POSE_DIM);
    cov.an.rows_mut(t, POSE_DIM).copy_from(&an);
    Ok(())
}

/// Appends map keyframe poses to the nuisance part with their stored
/// covariance and zero correlation. Already-present ids are skipped.
/// Returns the number of keyframes added.
pub fn augment_keyframes<'a>(
    state: &mut StateVector,
    cov: &mut BlockCovariance,
    kfs: impl IntoIterator<Item = (KeyframeId, &'a Pose, &'a Matrix6<f64>)>,
) -> usize {
    let mut fresh: Vec<(KeyframeId, Pose, Matrix6<f64>)> = Vec::new();
    for (id, pose, c) in kfs {
        if state.kf_index.contains_key(&id) || fresh.iter().any(|f| f.0 == id) {
            warn!("keyframe {id} already in state, skipping");
            continue;
        }
        fresh.push((id, *pose, *c));
    }
    if fresh.is_empty() {
        return 0;
    }
    let a = cov.active_dim();
    let n = cov.nuisance_dim();
    let add = POSE_DIM * fresh.len();
    let mut nn = DMatrix::zeros(n + add, n + add);
    nn.view_mut((0, 0), (n, n)).copy_from(&cov.nn);
    let mut an = DMatrix::zeros(a, n + add);
    an.view_mut((0, 0), (a, n)).copy_from(&cov.an);
    for (k, (id, pose, c)) in fresh.iter().enumerate() {
        let off = n + POSE_DIM * k;
        for j in 0..POSE_DIM {
            for i in 0..POSE_DIM {
                nn[(off + i, off + j)] = c[(i, j)];
            }
        }
        state.kf_index.insert(*id, state.keyframes.len());
        state.keyframes.push((*id, *pose));
    }
    cov.nn = nn;
    cov.an = an;
    fresh.len()
}

/// Checks that the state bookkeeping and covariance dimensions agree.
pub fn audit(state: &StateVector, cov: &BlockCovariance) -> Result<()> {
    let expected_a = state.active_dim();
    let expected_n = state.nuisance_dim();
    let ok = cov.aa.nrows() == expected_a
        && cov.aa.ncols() == expected_a
        && cov.an.nrows() == expected_a
        && cov.an.ncols() == expected_n
        && cov.nn.nrows() == expected_n
        && cov.nn.ncols() == expected_n
        && state.kf_index.len() == state.keyframes.len()
        && state.keyframes.iter().enumerate().all(|(i, (id, _))| state.kf_index.get(id) == Some(&i))
        && state.clones.len() <= state.max_clones;
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "state/covariance mismatch: state ({expected_a}, {expected_n}), covariance ({}, {})",
            cov.active_dim(),
            cov.nuisance_dim()
        )))
    }
}
