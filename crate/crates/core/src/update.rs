//! Linearized measurement updates: null-space projection, measurement
//! compression, χ² gating, and the standard and Schmidt EKF updates.
//!
//! Both updates share the partitioned innovation terms
//!
//! ```text
//! PHᵀ_A = P_AA·H_Aᵀ + P_AN·H_Nᵀ            (a × m)
//! HP_N  = H_A·P_AN + H_N·P_NN              (m × n)
//! S     = H_A·PHᵀ_A + H_N·(HP_N)ᵀ + σ²·I
//! ```
//!
//! `H_N` is stored compactly: only the columns of the keyframes a measurement
//! touches, so `H_N·P_NN` costs `O(m·n)` rather than `O(m·n²)`. The Schmidt
//! update never forms `K_N` and leaves `x_N` and `P_NN` untouched.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::state::{symmetrize, BlockCovariance, StateVector, POSE_DIM};

/// Conditioning bound beyond which an innovation covariance is rejected.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

/// Stacked linearized measurement `r = H_A·x̃_A + H_N·x̃_N + n`, `n ~ N(0, σ²I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub r: DVector<f64>,
    pub h_active: DMatrix<f64>,
    /// Columns for the keyframes in `nuisance_slots`, six per keyframe.
    pub h_nuisance: DMatrix<f64>,
    pub nuisance_slots: Vec<usize>,
    pub noise_var: f64,
}

impl Measurement {
    pub fn active_only(r: DVector<f64>, h_active: DMatrix<f64>, noise_var: f64) -> Self {
        let m = r.len();
        Self { r, h_active, h_nuisance: DMatrix::zeros(m, 0), nuisance_slots: Vec::new(), noise_var }
    }

    pub fn rows(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// Dense `H_N` over the whole nuisance state.
    pub fn dense_nuisance(&self, nuisance_dim: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.rows(), nuisance_dim);
        for (j, slot) in self.nuisance_slots.iter().enumerate() {
            let blk = self.h_nuisance.columns(POSE_DIM * j, POSE_DIM);
            let dst = POSE_DIM * slot;
            let cur = h.columns(dst, POSE_DIM) + blk;
            h.columns_mut(dst, POSE_DIM).copy_from(&cur);
        }
        h
    }

    /// Dense `[H_A | H_N]`.
    pub fn dense(&self, nuisance_dim: usize) -> DMatrix<f64> {
        let a = self.h_active.ncols();
        let mut h = DMatrix::zeros(self.rows(), a + nuisance_dim);
        h.columns_mut(0, a).copy_from(&self.h_active);
        h.columns_mut(a, nuisance_dim).copy_from(&self.dense_nuisance(nuisance_dim));
        h
    }

    /// Appends the rows of `other`, merging nuisance column sets.
    pub fn stack(&mut self, other: &Measurement) {
        assert_eq!(self.h_active.ncols(), other.h_active.ncols());
        let mut slots = self.nuisance_slots.clone();
        for s in &other.nuisance_slots {
            if !slots.contains(s) {
                slots.push(*s);
            }
        }
        let m0 = self.rows();
        let m = m0 + other.rows();
        let a = self.h_active.ncols();
        let mut r = DVector::zeros(m);
        r.rows_mut(0, m0).copy_from(&self.r);
        r.rows_mut(m0, other.rows()).copy_from(&other.r);
        let mut ha = DMatrix::zeros(m, a);
        ha.rows_mut(0, m0).copy_from(&self.h_active);
        ha.rows_mut(m0, other.rows()).copy_from(&other.h_active);
        let mut hn = DMatrix::zeros(m, POSE_DIM * slots.len());
        for (src, rows, off) in [(&*self, m0, 0usize), (other, other.rows(), m0)] {
            for (j, s) in src.nuisance_slots.iter().enumerate() {
                let k = slots.iter().position(|x| x == s).unwrap();
                let blk = src.h_nuisance.columns(POSE_DIM * j, POSE_DIM);
                hn.view_mut((off, POSE_DIM * k), (rows, POSE_DIM)).copy_from(&blk);
            }
        }
        self.r = r;
        self.h_active = ha;
        self.h_nuisance = hn;
        self.nuisance_slots = slots;
    }
}

/// In-place Householder triangularization of the first `pivot_cols`
/// columns, applied to every column of `m` (computes `Qᵀ·m`). Columns that
/// are numerically dependent on earlier ones are skipped. Returns the rank.
pub fn householder_eliminate(m: &mut DMatrix<f64>, pivot_cols: usize) -> usize {
    let (rows, cols) = m.shape();
    if rows == 0 {
        return 0;
    }
    let scale = m.columns(0, pivot_cols).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-11 * scale.max(f64::MIN_POSITIVE) * (rows as f64).sqrt();
    let data = m.as_mut_slice();
    let mut k = 0;
    let mut v = vec![0.0; rows];
    for j in 0..pivot_cols {
        if k >= rows {
            break;
        }
        let col = &data[j * rows + k..(j + 1) * rows];
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= tol {
            continue;
        }
        let len = rows - k;
        v[..len].copy_from_slice(col);
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2: f64 = v[..len].iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for c in j..cols {
                let cc = &mut data[c * rows + k..(c + 1) * rows];
                let dot: f64 = v[..len].iter().zip(cc.iter()).map(|(a, b)| a * b).sum();
                let f = 2.0 * dot / vnorm2;
                for (x, vi) in cc.iter_mut().zip(v[..len].iter()) {
                    *x -= f * vi;
                }
            }
        }
        let cj = &mut data[j * rows + k..(j + 1) * rows];
        cj[0] = alpha;
        for x in cj[1..].iter_mut() {
            *x = 0.0;
        }
        k += 1;
    }
    k
}

/// Result of projecting a residual onto the left null space of `H_f`.
#[derive(Clone, Debug)]
pub struct NullspaceProjection {
    pub r: DVector<f64>,
    pub h: DMatrix<f64>,
    /// `H_f` had rank below its column count.
    pub degenerate: bool,
}

/// Projects `r = H_x·x̃ + H_f·f̃ + n` onto the left null space of `H_f`.
pub fn nullspace_project(r: &DVector<f64>, h_x: &DMatrix<f64>, h_f: &DMatrix<f64>) -> NullspaceProjection {
    let m = r.len();
    let nf = h_f.ncols();
    let nx = h_x.ncols();
    let mut big = DMatrix::zeros(m, nf + nx + 1);
    big.columns_mut(0, nf).copy_from(h_f);
    big.columns_mut(nf, nx).copy_from(h_x);
    big.column_mut(nf + nx).copy_from(r);
    let rank = householder_eliminate(&mut big, nf);
    let out_rows = m - rank;
    NullspaceProjection {
        r: big.view((rank, nf + nx), (out_rows, 1)).column(0).into_owned(),
        h: big.view((rank, nf), (out_rows, nx)).into_owned(),
        degenerate: rank < nf,
    }
}

/// Orthonormal basis `N` of the left null space of `h` (`Nᵀ·h = 0`).
pub fn left_nullspace(h: &DMatrix<f64>) -> DMatrix<f64> {
    let m = h.nrows();
    let nf = h.ncols();
    let mut big = DMatrix::zeros(m, nf + m);
    big.columns_mut(0, nf).copy_from(h);
    big.columns_mut(nf, m).fill_with_identity();
    let rank = householder_eliminate(&mut big, nf);
    big.view((rank, nf), (m - rank, m)).transpose()
}

/// Replaces a tall measurement by an equivalent one with at most as many
/// rows as it has columns. Valid because the noise is isotropic.
pub fn compress(meas: &mut Measurement) {
    let a = meas.h_active.ncols();
    let k = meas.h_nuisance.ncols();
    let m = meas.rows();
    if m <= a + k {
        return;
    }
    let mut big = DMatrix::zeros(m, a + k + 1);
    big.columns_mut(0, a).copy_from(&meas.h_active);
    big.columns_mut(a, k).copy_from(&meas.h_nuisance);
    big.column_mut(a + k).copy_from(&meas.r);
    let rank = householder_eliminate(&mut big, a + k);
    // Rows past the rank carry no state information; keeping their residual
    // energy out of the gate is consistent since they are pure noise.
    meas.h_active = big.view((0, 0), (rank, a)).into_owned();
    meas.h_nuisance = big.view((0, a), (rank, k)).into_owned();
    meas.r = big.view((0, a + k), (rank, 1)).column(0).into_owned();
}

/// 95% χ² quantile, cached per degree of freedom.
pub fn chi2_threshold(dof: usize) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<usize, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().unwrap().get(&dof) {
        return *v;
    }
    let v = ChiSquared::new(dof.max(1) as f64).map(|d| d.inverse_cdf(0.95)).unwrap_or(f64::INFINITY);
    cache.lock().unwrap().insert(dof, v);
    v
}

/// Partitioned innovation terms shared by all update flavors.
pub struct Innovation {
    pub pht_a: DMatrix<f64>,
    pub hp_n: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

/// Columns of `h` holding at least one nonzero entry.
fn nonzero_columns(h: &DMatrix<f64>) -> Vec<usize> {
    (0..h.ncols()).filter(|j| h.column(*j).iter().any(|v| *v != 0.0)).collect()
}

pub fn innovation(cov: &BlockCovariance, meas: &Measurement) -> Innovation {
    let m = meas.rows();
    // Local constraints touch only a few clones; skipping the structurally
    // zero columns keeps the cost proportional to what is observed.
    let nz = nonzero_columns(&meas.h_active);
    let ha = meas.h_active.select_columns(&nz);
    let mut pht_a = cov.aa.select_columns(&nz) * ha.transpose();
    let mut hp_n = &ha * cov.an.select_rows(&nz);
    for (j, slot) in meas.nuisance_slots.iter().enumerate() {
        let hj = meas.h_nuisance.columns(POSE_DIM * j, POSE_DIM);
        let off = POSE_DIM * slot;
        pht_a.gemm(1.0, &cov.an.columns(off, POSE_DIM), &hj.transpose(), 1.0);
        hp_n.gemm(1.0, &hj, &cov.nn.rows(off, POSE_DIM), 1.0);
    }
    let mut s = &ha * pht_a.select_rows(&nz);
    for (j, slot) in meas.nuisance_slots.iter().enumerate() {
        let hj = meas.h_nuisance.columns(POSE_DIM * j, POSE_DIM);
        s.gemm(1.0, &hj, &hp_n.columns(POSE_DIM * slot, POSE_DIM).transpose(), 1.0);
    }
    for i in 0..m {
        s[(i, i)] += meas.noise_var;
    }
    symmetrize(&mut s);
    Innovation { pht_a, hp_n, s }
}

/// `S = H·P·Hᵀ + σ²·I` alone, touching only the observed blocks of `P`.
pub fn innovation_covariance(cov: &BlockCovariance, meas: &Measurement) -> DMatrix<f64> {
    let nz = nonzero_columns(&meas.h_active);
    let ha = meas.h_active.select_columns(&nz);
    let p_aa = cov.aa.select_rows(&nz).select_columns(&nz);
    let mut s = &ha * p_aa * ha.transpose();
    if !meas.nuisance_slots.is_empty() {
        let cols: Vec<usize> = meas.nuisance_slots.iter().flat_map(|k| POSE_DIM * k..POSE_DIM * (k + 1)).collect();
        let p_an = cov.an.select_rows(&nz).select_columns(&cols);
        let p_nn = cov.nn.select_rows(&cols).select_columns(&cols);
        let cross = &ha * p_an * meas.h_nuisance.transpose();
        s += &cross + cross.transpose();
        s += &meas.h_nuisance * p_nn * meas.h_nuisance.transpose();
    }
    for i in 0..meas.rows() {
        s[(i, i)] += meas.noise_var;
    }
    symmetrize(&mut s);
    s
}

/// Outcome of a gated update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateOutcome {
    Applied { chi2: f64, dof: usize },
    Rejected { chi2: f64, threshold: f64 },
    Skipped(SkipReason),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipReason {
    Empty,
    SingularInnovation,
    IllConditioned,
}

impl UpdateOutcome {
    pub fn applied(&self) -> bool {
        matches!(self, UpdateOutcome::Applied { .. })
    }
}

fn factor(s: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, SkipReason> {
    let chol = Cholesky::new(s.clone()).ok_or(SkipReason::SingularInnovation)?;
    let l = chol.l_dirty();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..s.nrows() {
        let d = l[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    // (max/min diagonal of the Cholesky factor)² bounds the condition
    // number from below and is cheap.
    if lo <= 0.0 || (hi / lo).powi(2) > MAX_INNOVATION_CONDITION {
        return Err(SkipReason::IllConditioned);
    }
    Ok(chol)
}

/// Mahalanobis distance `rᵀ·S⁻¹·r`, or `None` when `S` cannot be factored.
pub fn mahalanobis(cov: &BlockCovariance, meas: &Measurement) -> Option<f64> {
    let chol = factor(&innovation_covariance(cov, meas)).ok()?;
    Some(meas.r.dot(&chol.solve(&meas.r)))
}

/// χ² test at 95%: accept iff `rᵀ·S⁻¹·r < χ²₀.₉₅(dof)`. Singular `S` rejects.
pub fn chi2_gate(cov: &BlockCovariance, meas: &Measurement) -> bool {
    if meas.is_empty() {
        return false;
    }
    match mahalanobis(cov, meas) {
        Some(d) => d < chi2_threshold(meas.rows()),
        None => false,
    }
}

enum Flavor {
    Schmidt,
    Full,
}

fn apply(
    state: &mut StateVector,
    cov: &mut BlockCovariance,
    meas: &Measurement,
    gate: bool,
    flavor: Flavor,
) -> UpdateOutcome {
    if meas.is_empty() {
        return UpdateOutcome::Skipped(SkipReason::Empty);
    }
    let inn = innovation(cov, meas);
    let chol = match factor(&inn.s) {
        Ok(c) => c,
        Err(reason) => {
            debug!("update skipped: {reason:?}");
            return UpdateOutcome::Skipped(reason);
        }
    };
    let s_inv_r = chol.solve(&meas.r);
    let chi2 = meas.r.dot(&s_inv_r);
    if gate {
        let threshold = chi2_threshold(meas.rows());
        if !(chi2 < threshold) {
            return UpdateOutcome::Rejected { chi2, threshold };
        }
    }
    // K_A = PHᵀ_A·S⁻¹
    let k_a = chol.solve(&inn.pht_a.transpose()).transpose();
    let dx_a = &inn.pht_a * &s_inv_r;
    if let Flavor::Full = flavor {
        if cov.nuisance_dim() > 0 {
            let w = chol.solve(&inn.hp_n);
            let dx_n = inn.hp_n.transpose() * &s_inv_r;
            cov.nn.gemm_tr(-1.0, &inn.hp_n, &w, 1.0);
            symmetrize(&mut cov.nn);
            state.retract_nuisance(&dx_n);
        }
    }
    cov.aa.gemm(-1.0, &k_a, &inn.pht_a.transpose(), 1.0);
    if cov.nuisance_dim() > 0 {
        cov.an.gemm(-1.0, &k_a, &inn.hp_n, 1.0);
    }
    cov.symmetrize_active();
    state.retract_active(&dx_a);
    UpdateOutcome::Applied { chi2, dof: meas.rows() }
}

/// Standard EKF update of the whole state (`K = P·Hᵀ·S⁻¹`, `P ← P − K·H·P`).
pub fn ekf_update(state: &mut StateVector, cov: &mut BlockCovariance, meas: &Measurement) -> UpdateOutcome {
    apply(state, cov, meas, false, Flavor::Full)
}

/// Schmidt update: `K_N = 0`, `x_N` and `P_NN` unchanged,
/// `P_AA ← P_AA − K_A·S·K_Aᵀ`, `P_AN ← P_AN − K_A·(H_A·P_AN + H_N·P_NN)`.
pub fn schmidt_update(state: &mut StateVector, cov: &mut BlockCovariance, meas: &Measurement) -> UpdateOutcome {
    apply(state, cov, meas, false, Flavor::Schmidt)
}

/// [`schmidt_update`] preceded by the χ² gate.
pub fn gated_schmidt_update(state: &mut StateVector, cov: &mut BlockCovariance, meas: &Measurement) -> UpdateOutcome {
    apply(state, cov, meas, true, Flavor::Schmidt)
}
