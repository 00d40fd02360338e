//! Strapdown IMU model: state, midpoint propagation and its linearization.
//!
//! The 15-dimensional error state is ordered `(δθ, δp, δv, δb_g, δb_a)`.
//! Between two IMU samples the measurement is held at the interval midpoint
//! (the caller averages consecutive samples), orientation is integrated
//! exactly for a constant rate and velocity/position use the mid-interval
//! attitude:
//!
//! ```text
//! ω̂ = ω_m − b_g,   â = a_m − b_a
//! R⁺ = Exp(−ω̂·dt)·R,   R_mid = Exp(−ω̂·dt/2)·R
//! v⁺ = v + (R_midᵀ·â + g)·dt
//! p⁺ = p + v·dt + ½·(R_midᵀ·â + g)·dt²
//! ```
//!
//! Continuous-time noise densities are discretized per interval as
//! `σ²/dt` for measurement white noise and `σ²·dt` for bias random walks.

use crate::error::{Error, Result};
use crate::geometry::{right_jacobian, skew, UnitQuatJPL};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

pub const IMU_DIM: usize = 15;
pub const NOISE_DIM: usize = 12;
pub const MAX_DT: f64 = 0.1;

pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Matrix15x12 = SMatrix<f64, 15, 12>;
pub type Matrix12 = SMatrix<f64, 12, 12>;
pub type Vector15 = SVector<f64, 15>;

/// Standard gravity in the local frame (z up).
pub fn default_gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -9.81)
}

/// IMU navigation state: `ᴵq_L`, `ᴸp_I`, `ᴸv_I`, gyro and accelerometer biases.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ImuState {
    pub q: UnitQuatJPL,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub bg: Vector3<f64>,
    pub ba: Vector3<f64>,
}

impl ImuState {
    pub fn is_finite(&self) -> bool {
        self.q.is_finite() && [self.p, self.v, self.bg, self.ba].iter().all(|v| v.iter().all(|c| c.is_finite()))
    }

    /// Applies an error-state correction.
    pub fn retract(&self, d: &ErrorState) -> ImuState {
        ImuState {
            q: UnitQuatJPL::from_rotvec(&d.dtheta) * self.q,
            p: self.p + d.dp,
            v: self.v + d.dv,
            bg: self.bg + d.dbg,
            ba: self.ba + d.dba,
        }
    }

    /// Error state `δ` with `base.retract(δ) == self`.
    pub fn lift(&self, base: &ImuState) -> ErrorState {
        ErrorState {
            dtheta: (self.q * base.q.inverse()).to_rotvec(),
            dp: self.p - base.p,
            dv: self.v - base.v,
            dbg: self.bg - base.bg,
            dba: self.ba - base.ba,
        }
    }

    /// Pose `ᴸT_I` of the IMU.
    pub fn pose(&self) -> crate::geometry::Pose {
        crate::geometry::Pose::new(self.q, self.p)
    }
}

/// Error of an [`ImuState`].
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ErrorState {
    pub dtheta: Vector3<f64>,
    pub dp: Vector3<f64>,
    pub dv: Vector3<f64>,
    pub dbg: Vector3<f64>,
    pub dba: Vector3<f64>,
}

impl ErrorState {
    pub fn from_vector(v: &Vector15) -> Self {
        Self {
            dtheta: v.fixed_rows::<3>(0).into_owned(),
            dp: v.fixed_rows::<3>(3).into_owned(),
            dv: v.fixed_rows::<3>(6).into_owned(),
            dbg: v.fixed_rows::<3>(9).into_owned(),
            dba: v.fixed_rows::<3>(12).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector15 {
        let mut v = Vector15::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.dtheta);
        v.fixed_rows_mut::<3>(3).copy_from(&self.dp);
        v.fixed_rows_mut::<3>(6).copy_from(&self.dv);
        v.fixed_rows_mut::<3>(9).copy_from(&self.dbg);
        v.fixed_rows_mut::<3>(12).copy_from(&self.dba);
        v
    }
}

/// One IMU reading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuSample {
    /// Average of two samples, stamped at `a.t`.
    pub fn midpoint(a: &ImuSample, b: &ImuSample) -> ImuSample {
        ImuSample { t: a.t, gyro: 0.5 * (a.gyro + b.gyro), accel: 0.5 * (a.accel + b.accel) }
    }

    /// Linear interpolation at time `t` between `a` and `b`.
    pub fn interpolate(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
        let s = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
        ImuSample { t, gyro: a.gyro + s * (b.gyro - a.gyro), accel: a.accel + s * (b.accel - a.accel) }
    }
}

/// Continuous-time IMU noise densities.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImuNoise {
    /// Gyro white noise, rad/s/√Hz.
    pub sigma_g: f64,
    /// Accelerometer white noise, m/s²/√Hz.
    pub sigma_a: f64,
    /// Gyro bias random walk, rad/s²/√Hz.
    pub sigma_bg: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub sigma_ba: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self { sigma_g: 1.6968e-4, sigma_a: 2.0e-3, sigma_bg: 1.9393e-5, sigma_ba: 3.0e-3 }
    }
}

impl ImuNoise {
    pub fn validate(&self) -> Result<()> {
        if [self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba].iter().all(|s| *s > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("IMU noise densities must be strictly positive".into()))
        }
    }

    /// Discrete noise covariance for one interval of length `dt`, ordered
    /// `(n_g, n_a, n_wg, n_wa)`.
    pub fn discrete(&self, dt: f64) -> Matrix12 {
        let mut q = Matrix12::zeros();
        for i in 0..3 {
            q[(i, i)] = self.sigma_g.powi(2) / dt;
            q[(3 + i, 3 + i)] = self.sigma_a.powi(2) / dt;
            q[(6 + i, 6 + i)] = self.sigma_bg.powi(2) * dt;
            q[(9 + i, 9 + i)] = self.sigma_ba.powi(2) * dt;
        }
        q
    }
}

fn check_inputs(x: &ImuState, s: &ImuSample, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(Error::InvalidTimeStep(dt));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("IMU state"));
    }
    if !(s.gyro.iter().chain(s.accel.iter()).all(|c| c.is_finite()) && s.t.is_finite()) {
        return Err(Error::NonFinite("IMU sample"));
    }
    Ok(())
}

/// Propagates the mean over one interval of length `dt` using the
/// (midpoint) measurement `s`.
pub fn propagate_state(x: &ImuState, s: &ImuSample, dt: f64, gravity: &Vector3<f64>) -> Result<ImuState> {
    check_inputs(x, s, dt)?;
    let w = s.gyro - x.bg;
    let a = s.accel - x.ba;
    let q_next = UnitQuatJPL::from_rotvec(&(w * dt)) * x.q;
    let q_mid = UnitQuatJPL::from_rotvec(&(w * (0.5 * dt))) * x.q;
    let acc = q_mid.to_rot().transpose() * a + gravity;
    Ok(ImuState { q: q_next, p: x.p + x.v * dt + 0.5 * acc * dt * dt, v: x.v + acc * dt, bg: x.bg, ba: x.ba })
}

/// Error-state transition `Φ` and noise Jacobian `G` of [`propagate_state`].
pub fn propagate_jacobians(x: &ImuState, s: &ImuSample, dt: f64) -> Result<(Matrix15, Matrix15x12)> {
    check_inputs(x, s, dt)?;
    let w = s.gyro - x.bg;
    let a = s.accel - x.ba;
    let dr = UnitQuatJPL::from_rotvec(&(w * dt)).to_rot();
    let dr_half = UnitQuatJPL::from_rotvec(&(w * (0.5 * dt))).to_rot();
    let r_mid_t = (dr_half * x.q.to_rot()).transpose();
    let jr = right_jacobian(&(w * dt));
    let jr_half = right_jacobian(&(w * (0.5 * dt)));
    let acc_skew = -r_mid_t * skew(&a);
    let half_dt2 = 0.5 * dt * dt;

    // Sensitivities of the mid-interval attitude error.
    let mid_theta = dr_half;
    let mid_bg = -jr_half * (0.5 * dt);

    let mut phi = Matrix15::identity();
    let set = |m: &mut Matrix15, r: usize, c: usize, b: &Matrix3<f64>| m.fixed_view_mut::<3, 3>(r, c).copy_from(b);
    set(&mut phi, 0, 0, &dr);
    set(&mut phi, 0, 9, &(-jr * dt));
    set(&mut phi, 3, 0, &(half_dt2 * acc_skew * mid_theta));
    set(&mut phi, 3, 6, &(Matrix3::identity() * dt));
    set(&mut phi, 3, 9, &(half_dt2 * acc_skew * mid_bg));
    set(&mut phi, 3, 12, &(-half_dt2 * r_mid_t));
    set(&mut phi, 6, 0, &(dt * acc_skew * mid_theta));
    set(&mut phi, 6, 9, &(dt * acc_skew * mid_bg));
    set(&mut phi, 6, 12, &(-dt * r_mid_t));

    let mut g = Matrix15x12::zeros();
    let setg = |m: &mut Matrix15x12, r: usize, c: usize, b: &Matrix3<f64>| m.fixed_view_mut::<3, 3>(r, c).copy_from(b);
    setg(&mut g, 0, 0, &(-jr * dt));
    setg(&mut g, 3, 0, &(half_dt2 * acc_skew * mid_bg));
    setg(&mut g, 3, 3, &(-half_dt2 * r_mid_t));
    setg(&mut g, 6, 0, &(dt * acc_skew * mid_bg));
    setg(&mut g, 6, 3, &(-dt * r_mid_t));
    setg(&mut g, 9, 6, &Matrix3::identity());
    setg(&mut g, 12, 9, &Matrix3::identity());
    Ok((phi, g))
}

/// Accumulated transition and noise of several consecutive intervals, so the
/// full covariance only needs touching once per camera frame.
#[derive(Clone, Debug)]
pub struct PropagationSegment {
    pub phi: Matrix15,
    pub q: Matrix15,
}

impl Default for PropagationSegment {
    fn default() -> Self {
        Self { phi: Matrix15::identity(), q: Matrix15::zeros() }
    }
}

impl PropagationSegment {
    pub fn push(&mut self, phi: &Matrix15, g: &Matrix15x12, qd: &Matrix12) {
        self.phi = phi * self.phi;
        self.q = phi * self.q * phi.transpose() + g * qd * g.transpose();
        self.q = 0.5 * (self.q + self.q.transpose());
    }

    pub fn is_identity(&self) -> bool {
        self.phi == Matrix15::identity() && self.q == Matrix15::zeros()
    }
}
