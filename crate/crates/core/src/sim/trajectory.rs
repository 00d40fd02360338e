//! Ground-truth trajectories with analytic first and second derivatives.
//!
//! The body frame is x forward, y left, z up, with the forward axis along
//! the velocity and zero roll: `ᴳR_I = Rz(ψ)·Ry(−θ)` for heading `ψ` and
//! climb angle `θ`.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Kinematic state of the body at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    /// `ᴳp_I`.
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    /// `ᴳR_I`.
    pub r_gi: Matrix3<f64>,
    /// Body-frame angular velocity.
    pub omega: Vector3<f64>,
}

impl TrajectorySample {
    /// `ᴳT_I`.
    pub fn pose(&self) -> Pose {
        Pose::from_parent_rotation(&self.r_gi, self.p)
    }
}

/// Attitude and body rates of a zero-roll body aligned with `v`.
fn heading_attitude(v: &Vector3<f64>, a: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let h2 = v.x * v.x + v.y * v.y;
    let h = h2.sqrt();
    if h < 1e-9 {
        return (Matrix3::identity(), Vector3::zeros());
    }
    let psi = v.y.atan2(v.x);
    let theta = v.z.atan2(h);
    let psi_dot = (v.x * a.y - v.y * a.x) / h2;
    let h_dot = (v.x * a.x + v.y * a.y) / h;
    let theta_dot = (h * a.z - v.z * h_dot) / (h2 + v.z * v.z);
    let r =
        Rotation3::from_axis_angle(&Vector3::z_axis(), psi) * Rotation3::from_axis_angle(&Vector3::y_axis(), -theta);
    let omega = Vector3::new(psi_dot * theta.sin(), -theta_dot, psi_dot * theta.cos());
    (r.into_inner(), omega)
}

/// Closed periodic cubic B-spline in position, interpolating samples taken
/// at uniform time spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicSpline {
    ctrl: Vec<Vector3<f64>>,
    dt: f64,
}

impl PeriodicSpline {
    /// Spline through `points`, passing point `i` at time `i·dt`.
    pub fn interpolate(points: &[Vector3<f64>], dt: f64) -> Result<Self> {
        if points.len() < 4 || !(dt > 0.0) {
            return Err(Error::Config("spline needs at least four points and dt > 0".into()));
        }
        let n = points.len();
        // Solve (P[i−1] + 4·P[i] + P[i+1]) / 6 = Q[i] on the cycle. The
        // system is strictly diagonally dominant, so Jacobi converges
        // geometrically with ratio 1/2.
        let mut ctrl = points.to_vec();
        for _ in 0..80 {
            let prev = ctrl.clone();
            for i in 0..n {
                ctrl[i] = (6.0 * points[i] - prev[(i + n - 1) % n] - prev[(i + 1) % n]) / 4.0;
            }
        }
        Ok(Self { ctrl, dt })
    }

    pub fn period(&self) -> f64 {
        self.dt * self.ctrl.len() as f64
    }

    /// Position, velocity and acceleration at `t` (wrapped to the period).
    pub fn eval(&self, t: f64) -> [Vector3<f64>; 3] {
        let n = self.ctrl.len();
        let s = t.rem_euclid(self.period()) / self.dt;
        let i = (s.floor() as usize).min(n - 1);
        let u = s - i as f64;
        let c = |k: isize| self.ctrl[((i as isize + k).rem_euclid(n as isize)) as usize];
        let (p0, p1, p2, p3) = (c(-1), c(0), c(1), c(2));
        let u2 = u * u;
        let u3 = u2 * u;
        let b = [
            (1.0 - u).powi(3) / 6.0,
            (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
            (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
            u3 / 6.0,
        ];
        let db = [-(1.0 - u).powi(2) / 2.0, 1.5 * u2 - 2.0 * u, -1.5 * u2 + u + 0.5, u2 / 2.0];
        let ddb = [1.0 - u, 3.0 * u - 2.0, -3.0 * u + 1.0, u];
        let comb = |w: [f64; 4]| p0 * w[0] + p1 * w[1] + p2 * w[2] + p3 * w[3];
        [comb(b), comb(db) / self.dt, comb(ddb) / (self.dt * self.dt)]
    }
}

/// Where the ground-truth path comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// Rounded-rectangle loop `|x/a|⁴ + |y/b|⁴ = 1` with gentle height
    /// undulation, scaled to `length` metres.
    Superellipse { length: f64, aspect: f64, speed: f64, z_amplitude: f64, z_cycles: u32 },
    /// Horizontal circle, traversed counter-clockwise.
    Circle { radius: f64, speed: f64 },
    /// Motionless at the origin.
    Stationary { duration: f64 },
    /// Closed loop through `x,y,z` rows of a CSV file.
    Waypoints { path: String, speed: f64 },
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec::Superellipse { length: 1300.0, aspect: 0.6, speed: 8.0, z_amplitude: 1.5, z_cycles: 3 }
    }
}

/// A ground-truth trajectory.
#[derive(Clone, Debug, PartialEq)]
pub enum Trajectory {
    Spline(PeriodicSpline),
    Circle { radius: f64, speed: f64 },
    Stationary { duration: f64 },
}

/// Knot spacing of generated splines, seconds.
const SPLINE_DT: f64 = 0.25;

impl Trajectory {
    pub fn from_spec(spec: &TrajectorySpec) -> Result<Self> {
        match spec {
            TrajectorySpec::Superellipse { length, aspect, speed, z_amplitude, z_cycles } => {
                if !(*length > 0.0 && *speed > 0.0 && *aspect > 0.0) {
                    return Err(Error::Config("superellipse length, aspect and speed must be positive".into()));
                }
                let dense: Vec<Vector3<f64>> = (0..20_000)
                    .map(|k| {
                        let th = TAU * k as f64 / 20_000.0;
                        let (c, s) = (th.cos(), th.sin());
                        Vector3::new(c.signum() * c.abs().sqrt(), aspect * s.signum() * s.abs().sqrt(), 0.0)
                    })
                    .collect();
                let mut pts = resample_closed(&dense, *length, *speed * SPLINE_DT);
                let n = pts.len() as f64;
                for (k, p) in pts.iter_mut().enumerate() {
                    p.z = z_amplitude * (TAU * *z_cycles as f64 * k as f64 / n).sin();
                }
                Ok(Trajectory::Spline(PeriodicSpline::interpolate(&pts, SPLINE_DT)?))
            }
            TrajectorySpec::Circle { radius, speed } => {
                if !(*radius > 0.0 && *speed > 0.0) {
                    return Err(Error::Config("circle radius and speed must be positive".into()));
                }
                Ok(Trajectory::Circle { radius: *radius, speed: *speed })
            }
            TrajectorySpec::Stationary { duration } => Ok(Trajectory::Stationary { duration: *duration }),
            TrajectorySpec::Waypoints { path, speed } => {
                let raw = read_waypoints(Path::new(path))?;
                let len = closed_length(&raw);
                let pts = resample_closed(&raw, len, speed * SPLINE_DT);
                Ok(Trajectory::Spline(PeriodicSpline::interpolate(&pts, SPLINE_DT)?))
            }
        }
    }

    /// Length of one lap, seconds.
    pub fn duration(&self) -> f64 {
        match self {
            Trajectory::Spline(s) => s.period(),
            Trajectory::Circle { radius, speed } => TAU * radius / speed,
            Trajectory::Stationary { duration } => *duration,
        }
    }

    pub fn sample(&self, t: f64) -> TrajectorySample {
        let (p, v, a) = match self {
            Trajectory::Spline(s) => {
                let [p, v, a] = s.eval(t);
                (p, v, a)
            }
            Trajectory::Circle { radius, speed } => {
                let w = speed / radius;
                let (s, c) = (w * t).sin_cos();
                (
                    Vector3::new(radius * c, radius * s, 0.0),
                    Vector3::new(-speed * s, speed * c, 0.0),
                    Vector3::new(-speed * w * c, -speed * w * s, 0.0),
                )
            }
            Trajectory::Stationary { .. } => (Vector3::zeros(), Vector3::zeros(), Vector3::zeros()),
        };
        let (r_gi, omega) = heading_attitude(&v, &a);
        TrajectorySample { t, p, v, a, r_gi, omega }
    }
}

fn closed_length(pts: &[Vector3<f64>]) -> f64 {
    (0..pts.len()).map(|i| (pts[(i + 1) % pts.len()] - pts[i]).norm()).sum()
}

/// Resamples a closed polyline, scaled to total length `length`, at
/// (approximately) uniform arc-length spacing `step`.
fn resample_closed(pts: &[Vector3<f64>], length: f64, step: f64) -> Vec<Vector3<f64>> {
    let scale = length / closed_length(pts);
    let pts: Vec<Vector3<f64>> = pts.iter().map(|p| p * scale).collect();
    let n_out = ((length / step).round() as usize).max(4);
    let spacing = length / n_out as f64;
    let mut out = Vec::with_capacity(n_out);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 0..n_out {
        let s = k as f64 * spacing;
        loop {
            let a = pts[seg % pts.len()];
            let b = pts[(seg + 1) % pts.len()];
            let l = (b - a).norm();
            if s <= seg_start + l || seg + 1 >= pts.len() {
                let u = if l > 0.0 { ((s - seg_start) / l).clamp(0.0, 1.0) } else { 0.0 };
                out.push(a + (b - a) * u);
                break;
            }
            seg_start += l;
            seg += 1;
        }
    }
    out
}

/// Reads `x,y,z` rows (an optional header is skipped).
pub fn read_waypoints(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let vals: Vec<f64> = match rec.iter().map(|f| f.trim().parse::<f64>()).collect() {
            Ok(v) => v,
            Err(_) if out.is_empty() => continue,
            Err(e) => return Err(Error::Parse(format!("waypoint row {rec:?}: {e}"))),
        };
        if vals.len() != 3 {
            return Err(Error::Parse(format!("waypoint row needs 3 columns, got {}", vals.len())));
        }
        out.push(Vector3::new(vals[0], vals[1], vals[2]));
    }
    if out.len() < 4 {
        return Err(Error::Parse("waypoint file needs at least four points".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_yaw_rate_is_speed_over_radius() {
        let traj = Trajectory::Circle { radius: 5.0, speed: 1.0 };
        let s = traj.sample(3.0);
        assert!((s.omega.z - 0.2).abs() < 1e-12);
        assert!(s.omega.xy().norm() < 1e-12);
    }

    #[test]
    fn spline_through_circle_matches_analytic_rates() {
        let (radius, speed) = (5.0, 1.0);
        let circle = Trajectory::Circle { radius, speed };
        let dt = 0.02;
        let n = (circle.duration() / dt).round() as usize;
        let dt = circle.duration() / n as f64;
        let pts: Vec<Vector3<f64>> = (0..n).map(|k| circle.sample(k as f64 * dt).p).collect();
        let spline = Trajectory::Spline(PeriodicSpline::interpolate(&pts, dt).unwrap());
        for k in 0..200 {
            let t = 0.137 * k as f64;
            let s = spline.sample(t);
            assert!((s.omega.z - 0.2).abs() < 1e-6, "ω_z = {}", s.omega.z);
        }
    }

    #[test]
    fn stationary_has_zero_derivatives() {
        let s = Trajectory::Stationary { duration: 10.0 }.sample(4.0);
        assert_eq!(s.v, Vector3::zeros());
        assert_eq!(s.a, Vector3::zeros());
        assert_eq!(s.omega, Vector3::zeros());
    }

    #[test]
    fn attitude_rate_matches_finite_difference() {
        let traj = Trajectory::from_spec(&TrajectorySpec::default()).unwrap();
        for k in 0..50 {
            let t = 3.1 * k as f64;
            let h = 1e-5;
            let r0 = traj.sample(t - h).r_gi;
            let r1 = traj.sample(t + h).r_gi;
            let rd = (r1 - r0) / (2.0 * h);
            let w = crate::geometry::skew(&traj.sample(t).omega);
            let expected = traj.sample(t).r_gi * w;
            assert!((rd - expected).abs().max() < 1e-6);
        }
    }

    #[test]
    fn default_loop_is_about_1300_m() {
        let traj = Trajectory::from_spec(&TrajectorySpec::default()).unwrap();
        let n = 20_000;
        let dt = traj.duration() / n as f64;
        let len: f64 = (0..n).map(|k| (traj.sample((k + 1) as f64 * dt).p - traj.sample(k as f64 * dt).p).norm()).sum();
        assert!((len - 1300.0).abs() < 15.0, "length {len}");
        let speeds: Vec<f64> = (0..n).step_by(50).map(|k| traj.sample(k as f64 * dt).v.norm()).collect();
        let (lo, hi) = speeds.iter().fold((f64::MAX, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
        assert!(lo > 6.0 && hi < 10.0, "speed range {lo}..{hi}");
    }

    #[test]
    fn same_spec_gives_identical_spline() {
        let a = Trajectory::from_spec(&TrajectorySpec::default()).unwrap();
        let b = Trajectory::from_spec(&TrajectorySpec::default()).unwrap();
        assert_eq!(a, b);
    }
}
