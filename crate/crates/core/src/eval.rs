//! End-to-end runs and their scoring: RMSE without alignment, position
//! NEES, 3-σ envelopes, update timings, and the update-cost scaling bench.

use std::collections::HashMap;
use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix6, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::{Filter, FilterConfig, FilterStats, Mode};
use crate::geometry::Pose;
use crate::global::MatchSet;
use crate::imu::{ImuState, Matrix15};
use crate::sim::{generate_world, SimConfig, SimWorld};
use crate::state::{augment_clone, augment_keyframes, init_rel_transform, BlockCovariance, StateVector};
use crate::update::{ekf_update, schmidt_update, Measurement};

/// Position error norm beyond which a run is declared diverged.
pub const DIVERGENCE_THRESHOLD_M: f64 = 1e4;

/// Everything that determines a run besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub sim: SimConfig,
    pub filter: FilterConfig,
    pub mode: Mode,
    pub relin: bool,
}

impl RunSpec {
    pub fn new(sim: SimConfig, filter: FilterConfig, mode: Mode, relin: bool) -> Self {
        Self { sim, filter, mode, relin }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Filter settings that must agree with the simulated sensors.
pub fn filter_config_for(sim: &SimConfig, base: &FilterConfig) -> FilterConfig {
    let mut f = base.clone();
    f.sigma_px = sim.sigma_px.max(1e-3);
    f.imu_noise = sim.imu_noise;
    for s in [&mut f.imu_noise.sigma_g, &mut f.imu_noise.sigma_a, &mut f.imu_noise.sigma_bg, &mut f.imu_noise.sigma_ba]
    {
        *s = s.max(1e-9);
    }
    f.gravity = crate::sim::GRAVITY.into();
    f
}

/// One estimator output compared with ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub t: f64,
    pub est: [f64; 3],
    pub gt: [f64; 3],
    pub err: [f64; 3],
    pub sigma3: [f64; 3],
    pub nees: Option<f64>,
    /// Whether `x_t` was estimated at this step.
    pub global_initialized: bool,
    /// `x_t` translation error, once initialized.
    pub xt_err: Option<[f64; 3]>,
    pub xt_sigma3: Option<[f64; 3]>,
    /// 6-dof pose NEES, with `pose_nees` set and `x_t` initialized.
    pub nees_pose: Option<f64>,
}

impl ReportRow {
    pub fn err_norm(&self) -> f64 {
        Vector3::from(self.err).norm()
    }

    pub fn inside_3sigma(&self) -> [bool; 3] {
        [0, 1, 2].map(|i| self.err[i].abs() <= self.sigma3[i])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub max_ms: f64,
}

impl Timing {
    pub fn from_secs(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut ms: Vec<f64> = samples.iter().map(|s| s * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        Self {
            count: ms.len(),
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            median_ms: median_sorted(&ms),
            max_ms: *ms.last().unwrap(),
        }
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Equality is bitwise on the floats, so a NaN metric (nothing to average)
/// compares equal to itself.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Summary {
    pub steps: usize,
    #[serde(deserialize_with = "nan_if_null")]
    pub rmse: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub nees_mean: f64,
    pub nees_count: usize,
    pub nees_skipped: usize,
    /// Fraction of (step, axis) pairs with |error| ≤ 3σ.
    #[serde(deserialize_with = "nan_if_null")]
    pub inside_3sigma: f64,
    pub inside_3sigma_axis: [f64; 3],
    /// Fraction of steps with all three axes inside 3σ.
    #[serde(deserialize_with = "nan_if_null")]
    pub inside_3sigma_steps: f64,
    /// Mean 6-dof pose NEES; NaN when not computed.
    #[serde(deserialize_with = "nan_if_null")]
    pub nees_pose_mean: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub final_error: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub max_error: f64,
}

impl PartialEq for Summary {
    fn eq(&self, o: &Self) -> bool {
        let floats = |s: &Self| {
            let mut v = vec![
                s.rmse,
                s.nees_mean,
                s.inside_3sigma,
                s.inside_3sigma_steps,
                s.nees_pose_mean,
                s.final_error,
                s.max_error,
            ];
            v.extend(s.inside_3sigma_axis);
            v.into_iter().map(f64::to_bits).collect::<Vec<_>>()
        };
        self.steps == o.steps
            && self.nees_count == o.nees_count
            && self.nees_skipped == o.nees_skipped
            && floats(self) == floats(o)
    }
}

/// Result of one run. Wall-clock timings are carried along but excluded
/// from equality so that reports compare bit-for-bit across machines.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub relin: bool,
    pub diverged: bool,
    pub error: Option<String>,
    pub rows: Vec<ReportRow>,
    pub summary: Summary,
    pub stats: FilterStats,
    /// True `ᴳT_L` translation.
    pub true_offset: [f64; 3],
    pub global_update_timing: Timing,
}

impl PartialEq for RunReport {
    fn eq(&self, o: &Self) -> bool {
        self.config_hash == o.config_hash
            && self.seed == o.seed
            && self.mode == o.mode
            && self.relin == o.relin
            && self.diverged == o.diverged
            && self.error == o.error
            && self.rows == o.rows
            && self.summary == o.summary
            && self.stats == o.stats
            && self.true_offset == o.true_offset
            && self.global_update_timing.count == o.global_update_timing.count
    }
}

impl RunReport {
    /// Name of the configuration, e.g. `sm+r`.
    pub fn label(&self) -> String {
        label(self.mode, self.relin)
    }
}

pub fn label(mode: Mode, relin: bool) -> String {
    if relin {
        format!("{}+r", mode.name())
    } else {
        mode.name().to_string()
    }
}

/// `√(mean ‖p̂ − p‖²)` over samples whose timestamps agree. No alignment.
pub fn compute_rmse(est: &[(f64, Vector3<f64>)], gt: &[(f64, Vector3<f64>)]) -> Result<f64> {
    let truth: HashMap<u64, &Vector3<f64>> = gt.iter().map(|(t, p)| (t.to_bits(), p)).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for (t, p) in est {
        if let Some(g) = truth.get(&t.to_bits()) {
            sum += (p - *g).norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyOverlap);
    }
    Ok((sum / n as f64).sqrt())
}

/// `eᵀ P⁻¹ e`, or `None` when `P` is not positive definite.
pub fn compute_nees<const D: usize>(err: &SVector<f64, D>, cov: &SMatrix<f64, D, D>) -> Option<f64> {
    let chol = cov.cholesky()?;
    let v = chol.solve(err).dot(err);
    v.is_finite().then_some(v)
}

/// Runs one configuration on a pre-generated world.
pub fn run_world(world: &SimWorld, filter_cfg: &FilterConfig, mode: Mode, relin: bool, hash: String) -> RunReport {
    let t0 = world.imu[0].t;
    let mut report = RunReport {
        config_hash: hash,
        seed: world.seed,
        mode,
        relin,
        diverged: false,
        error: None,
        rows: Vec::with_capacity(world.frames.len()),
        summary: Summary::default(),
        stats: FilterStats::default(),
        true_offset: world.frame_offset.trans.into(),
        global_update_timing: Timing::default(),
    };
    let mut filter = match Filter::new(filter_cfg.clone(), mode, relin, world.camera, world.initial_state, t0) {
        Ok(f) => f,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };
    let matches: HashMap<u64, &MatchSet> = world.matches.iter().map(|m| (m.t.to_bits(), m)).collect();
    let mut times = Vec::new();
    let mut frame = 0;
    for s in &world.imu {
        if let Err(e) = filter.feed_imu(s) {
            report.error = Some(e.to_string());
            break;
        }
        if frame >= world.frames.len() || world.frames[frame].t != s.t {
            continue;
        }
        let fr = &world.frames[frame];
        let gt = &world.truth[frame];
        frame += 1;
        let out = match filter.process_frame(fr.t, &fr.obs, matches.get(&fr.t.to_bits()).copied(), Some(&world.map)) {
            Ok(o) => o,
            Err(e) => {
                report.error = Some(e.to_string());
                report.diverged = true;
                break;
            }
        };
        if let Some(dt) = out.global_update_secs {
            times.push(dt);
        }
        let est = out.global_position(&world.frame_offset);
        let err = est - gt.pose.trans;
        let cov = out.global_pos_cov.unwrap_or_else(|| {
            let r = world.frame_offset.rot_mat();
            r.transpose() * out.local_pos_cov * r
        });
        let sigma3 = [0, 1, 2].map(|i| 3.0 * cov[(i, i)].max(0.0).sqrt());
        let (xt_err, xt_sigma3) = match (out.rel_transform, out.rel_cov) {
            (Some(xt), Some(c)) => (
                Some((xt.trans - world.frame_offset.trans).into()),
                Some([3, 4, 5].map(|i| 3.0 * c[(i, i)].max(0.0).sqrt())),
            ),
            _ => (None, None),
        };
        report.rows.push(ReportRow {
            t: fr.t,
            est: est.into(),
            gt: gt.pose.trans.into(),
            err: err.into(),
            sigma3,
            nees: compute_nees(&err, &cov),
            global_initialized: out.rel_transform.is_some(),
            xt_err,
            xt_sigma3,
            nees_pose: match (out.global_pose(), out.global_pose_cov) {
                // Truth expressed as a correction of the estimate.
                (Some(est), Some(c)) => compute_nees(&gt.pose.lift(&est), &c),
                _ => None,
            },
        });
        if !err.norm().is_finite() || err.norm() > DIVERGENCE_THRESHOLD_M {
            report.diverged = true;
            report.error = Some(format!("position error {:.1} m at t = {:.2}", err.norm(), fr.t));
            break;
        }
    }
    report.stats = filter.stats.clone();
    report.global_update_timing = Timing::from_secs(&times);
    report.summary = summarize(&report.rows);
    if report.diverged {
        warn!("{} seed {} diverged: {:?}", report.label(), report.seed, report.error);
    }
    report
}

/// Generates the world for `seed` and runs one configuration on it.
pub fn run(spec: &RunSpec, seed: u64) -> Result<RunReport> {
    let world = generate_world(&spec.sim, seed)?;
    let fc = filter_config_for(&spec.sim, &spec.filter);
    Ok(run_world(&world, &fc, spec.mode, spec.relin, spec.config_hash()))
}

pub fn summarize(rows: &[ReportRow]) -> Summary {
    if rows.is_empty() {
        return Summary::default();
    }
    let n = rows.len() as f64;
    let rmse = (rows.iter().map(|r| Vector3::from(r.err).norm_squared()).sum::<f64>() / n).sqrt();
    let nees: Vec<f64> = rows.iter().filter_map(|r| r.nees).collect();
    let mut axis = [0.0; 3];
    for r in rows {
        for (a, inside) in axis.iter_mut().zip(r.inside_3sigma()) {
            *a += inside as u8 as f64;
        }
    }
    let axis = axis.map(|a| a / n);
    Summary {
        steps: rows.len(),
        rmse,
        nees_mean: if nees.is_empty() { f64::NAN } else { nees.iter().sum::<f64>() / nees.len() as f64 },
        nees_count: nees.len(),
        nees_skipped: rows.len() - nees.len(),
        inside_3sigma: axis.iter().sum::<f64>() / 3.0,
        inside_3sigma_axis: axis,
        inside_3sigma_steps: rows.iter().filter(|r| r.inside_3sigma().iter().all(|b| *b)).count() as f64 / n,
        nees_pose_mean: {
            let v: Vec<f64> = rows.iter().filter_map(|r| r.nees_pose).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        },
        final_error: rows.last().unwrap().err_norm(),
        max_error: rows.iter().map(ReportRow::err_norm).fold(0.0, f64::max),
    }
}

// JSON writes non-finite floats as null.
fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Runs every `(mode, relin)` configuration on the worlds of every seed.
/// Worlds run concurrently; each filter is single-threaded. Results are in
/// seed-major order.
pub fn monte_carlo(
    sim: &SimConfig,
    filter: &FilterConfig,
    configs: &[(Mode, bool)],
    seeds: &[u64],
) -> Result<Vec<Vec<RunReport>>> {
    sim.validate()?;
    filter.validate()?;
    let fc = filter_config_for(sim, filter);
    seeds
        .par_iter()
        .map(|&seed| {
            let world = generate_world(sim, seed)?;
            Ok(configs
                .iter()
                .map(|&(mode, relin)| {
                    let hash = RunSpec::new(sim.clone(), filter.clone(), mode, relin).config_hash();
                    run_world(&world, &fc, mode, relin, hash)
                })
                .collect())
        })
        .collect()
}

/// Re-linearization A/B on one world with a match dry spell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrySpellTrial {
    pub seed: u64,
    /// First match event after the spell.
    pub match_t: f64,
    /// Position error just before that match, without re-linearization.
    pub drift: f64,
    /// Lowest position error within the recovery window, without and with
    /// re-linearization.
    pub recovered_without: f64,
    pub recovered_with: f64,
    /// Error right after the first match, without and with.
    pub first_without: f64,
    pub first_with: f64,
    pub relinearizations: usize,
}

/// Runs `mode` with and without re-linearization on a world whose matches
/// stop for `duration` seconds from `start`. The world is cut `window`
/// seconds after the first match that follows the spell. `None` if no
/// match follows it.
pub fn dry_spell_trial(
    sim: &SimConfig,
    filter: &FilterConfig,
    mode: Mode,
    seed: u64,
    start: f64,
    duration: f64,
    window: f64,
) -> Result<Option<DrySpellTrial>> {
    let mut sim = sim.clone();
    sim.matches.dry_spell_start = Some(start);
    sim.matches.dry_spell_duration = duration;
    let world = generate_world(&sim, seed)?;
    let Some(m) = world.matches.iter().find(|m| m.t >= start + duration) else { return Ok(None) };
    let match_t = m.t;
    let mut world = world;
    let keep = world.frames.iter().take_while(|f| f.t <= match_t + window).count();
    world.frames.truncate(keep);
    world.truth.truncate(keep);
    world.imu.retain(|s| s.t <= world.frames[keep - 1].t);
    let fc = filter_config_for(&sim, filter);
    let summarize_run = |relin: bool| -> Option<(f64, f64, f64, usize)> {
        let r = run_world(&world, &fc, mode, relin, String::new());
        let k = r.rows.iter().position(|row| row.t == match_t)?;
        let before = r.rows[k.checked_sub(1)?].err_norm();
        let best = r.rows[k..].iter().map(ReportRow::err_norm).fold(f64::INFINITY, f64::min);
        Some((before, best, r.rows[k].err_norm(), r.stats.relinearizations))
    };
    let (Some(a), Some(b)) = (summarize_run(false), summarize_run(true)) else { return Ok(None) };
    Ok(Some(DrySpellTrial {
        seed,
        match_t,
        drift: a.0,
        recovered_without: a.1,
        recovered_with: b.1,
        first_without: a.2,
        first_with: b.2,
        relinearizations: b.3,
    }))
}

/// Mean of a summary field over reports, ignoring NaNs.
pub fn mean_of(reports: &[&RunReport], f: impl Fn(&Summary) -> f64) -> f64 {
    let v: Vec<f64> = reports.iter().map(|r| f(&r.summary)).filter(|x| x.is_finite()).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub nuisance_dim: usize,
    pub schmidt_ms: f64,
    pub ekf_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<TimingRow>,
    pub schmidt_slope: f64,
    pub ekf_slope: f64,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Rows in the benchmark measurement, about one compressed map match.
const BENCH_ROWS: usize = 40;
const BENCH_CLONES: usize = 12;

/// A filter-sized active state, `nuisance_dim / 6` keyframes, and a
/// measurement touching three of them.
fn bench_problem(nuisance_dim: usize, seed: u64) -> (StateVector, BlockCovariance, Measurement) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = StateVector::new(ImuState::default(), BENCH_CLONES);
    let mut cov = BlockCovariance::new_imu(&Matrix15::identity());
    for i in 0..BENCH_CLONES {
        augment_clone(&mut state, &mut cov, i as f64).expect("clone");
    }
    init_rel_transform(&mut state, &mut cov, Pose::identity(), &Matrix6::identity()).expect("x_t");
    let kfs: Vec<(u64, Pose)> = (0..(nuisance_dim / 6) as u64).map(|i| (i, Pose::identity())).collect();
    let m6 = Matrix6::identity();
    augment_keyframes(&mut state, &mut cov, kfs.iter().map(|(i, p)| (*i, p, &m6)));
    let (a, n) = (state.active_dim(), state.nuisance_dim());
    // Well-conditioned, weakly correlated covariance.
    cov.aa = DMatrix::identity(a, a);
    cov.an = DMatrix::from_fn(a, n, |_, _| rng.random_range(-1e-3..1e-3));
    let slots: Vec<usize> = (0..3).map(|i| i * kfs.len() / 3).collect();
    let mut meas = Measurement::active_only(
        DVector::from_fn(BENCH_ROWS, |_, _| rng.random_range(-1.0..1.0)),
        DMatrix::from_fn(BENCH_ROWS, a, |_, _| rng.random_range(-1.0..1.0)),
        1.0,
    );
    meas.h_nuisance = DMatrix::from_fn(BENCH_ROWS, slots.len() * 6, |_, _| rng.random_range(-1.0..1.0));
    meas.nuisance_slots = slots;
    (state, cov, meas)
}

/// Median wall time of Schmidt and full-EKF updates for each nuisance
/// dimension, with log-log slopes.
pub fn timing_harness(sizes: &[usize], repeats: usize) -> ScalingReport {
    let mut rows = Vec::new();
    for &n in sizes {
        let (state, cov, meas) = bench_problem(n, n as u64);
        let time = |schmidt: bool| {
            let mut v: Vec<f64> = (0..repeats)
                .map(|_| {
                    let mut s = state.clone();
                    let mut c = cov.clone();
                    let t = Instant::now();
                    let out =
                        if schmidt { schmidt_update(&mut s, &mut c, &meas) } else { ekf_update(&mut s, &mut c, &meas) };
                    let dt = t.elapsed().as_secs_f64();
                    assert!(out.applied(), "benchmark update must apply");
                    dt * 1e3
                })
                .collect();
            v.sort_by(f64::total_cmp);
            median_sorted(&v)
        };
        let schmidt_ms = time(true);
        let ekf_ms = time(false);
        rows.push(TimingRow { nuisance_dim: n, schmidt_ms, ekf_ms });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.nuisance_dim as f64).collect();
    let s: Vec<f64> = rows.iter().map(|r| r.schmidt_ms).collect();
    let e: Vec<f64> = rows.iter().map(|r| r.ekf_ms).collect();
    ScalingReport { schmidt_slope: loglog_slope(&x, &s), ekf_slope: loglog_slope(&x, &e), rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn rmse_examples() {
        let gt: Vec<(f64, Vector3<f64>)> = (0..10).map(|i| (i as f64, Vector3::new(i as f64, 0.0, 1.0))).collect();
        assert_eq!(compute_rmse(&gt, &gt).unwrap(), 0.0);
        let off: Vec<_> = gt.iter().map(|(t, p)| (*t, p + Vector3::new(0.0, 1.0, 0.0))).collect();
        assert!((compute_rmse(&off, &gt).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(compute_rmse(&[(100.0, Vector3::zeros())], &gt), Err(Error::EmptyOverlap)));
    }

    #[test]
    fn rmse_of_gaussian_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt: Vec<(f64, Vector3<f64>)> = (0..10_000).map(|i| (i as f64, Vector3::zeros())).collect();
        let est: Vec<_> = gt
            .iter()
            .map(|(t, _)| {
                let g = |r: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(r) };
                (*t, Vector3::new(g(&mut rng), g(&mut rng), g(&mut rng)) * 0.1)
            })
            .collect();
        let r = compute_rmse(&est, &gt).unwrap();
        assert!((r / 0.03f64.sqrt() - 1.0).abs() < 0.05, "rmse {r}");
    }

    #[test]
    fn nees_examples() {
        assert_eq!(compute_nees(&Vector3::zeros(), &Matrix3::identity()), Some(0.0));
        assert!(
            (compute_nees(&Vector3::new(2.0, 0.0, 0.0), &(Matrix3::identity() * 4.0)).unwrap() - 1.0).abs() < 1e-12
        );
        assert_eq!(compute_nees(&Vector3::x(), &Matrix3::zeros()), None);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [60.0, 600.0, 6000.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn hash_changes_with_config() {
        let a = RunSpec::new(SimConfig::default(), FilterConfig::default(), Mode::Mm, false);
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.relin = true;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn pose_nees_only_with_flag() {
        let sim = SimConfig { duration: Some(40.0), ..SimConfig::default() };
        let w = generate_world(&sim, 3).unwrap();
        let mut fc = filter_config_for(&sim, &FilterConfig::default());
        let off = run_world(&w, &fc, Mode::Mm, false, String::new());
        assert!(off.rows.iter().all(|r| r.nees_pose.is_none()));
        assert!(off.summary.nees_pose_mean.is_nan());
        fc.pose_nees = true;
        let on = run_world(&w, &fc, Mode::Mm, false, String::new());
        assert!(on.rows.iter().any(|r| r.nees_pose.is_some()));
        assert!(on.rows.iter().all(|r| r.nees_pose.is_some() == r.global_initialized));
        assert!(on.summary.nees_pose_mean.is_finite());
        // The flag adds output only.
        assert_eq!(
            on.rows.iter().map(|r| r.err).collect::<Vec<_>>(),
            off.rows.iter().map(|r| r.err).collect::<Vec<_>>()
        );
    }

    #[test]
    fn summaries_with_nan_metrics_compare_equal() {
        let b = Summary { nees_pose_mean: f64::NAN, ..Summary::default() };
        assert_eq!(b, b.clone());
        assert_ne!(b, Summary { rmse: 1.0, ..b.clone() });
    }
}
