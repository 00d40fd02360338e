//! Rotation and pose algebra in the JPL quaternion convention.
//!
//! Quaternions are stored as `(x, y, z, w)` with the vector part first. A
//! quaternion `ᴮq_A` yields the rotation matrix `ᴮR_A` that maps vectors
//! expressed in frame `A` into frame `B`:
//!
//! ```text
//! R(q) = (2w² − 1)·I − 2w·⌊v⌋ + 2·v·vᵀ
//! ```
//!
//! Composition follows the JPL multiplication table so that
//! `R(q ⊗ p) = R(q)·R(p)`:
//!
//! ```text
//! q ⊗ p = [ q_w·p_v + p_w·q_v − q_v × p_v ;  q_w·p_w − q_v·p_v ]
//! ```
//!
//! Rotation errors are local: a true rotation relates to its estimate by
//! `q = δq(δθ) ⊗ q̂`, i.e. `R ≈ (I − ⌊δθ⌋)·R̂`. Vector quantities use additive
//! errors.

use nalgebra::{Matrix2x3, Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector2, Vector3, Vector4, Vector6};

/// Normalization tolerance for unit quaternions.
pub const QUAT_NORM_TOL: f64 = 1e-9;

/// Smallest depth accepted by [`PinholeCamera::project`].
pub const MIN_DEPTH: f64 = 1e-6;

/// Skew-symmetric cross-product matrix `⌊v⌋`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential (Rodrigues), `Exp(φ) = I + sinθ⌊k⌋ + (1 − cosθ)⌊k⌋²`.
pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-8 {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ)·Exp(J_r(φ)·δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Unit quaternion in JPL convention, stored `(x, y, z, w)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuatJPL {
    coords: Vector4<f64>,
}

impl Default for UnitQuatJPL {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuatJPL {
    pub fn identity() -> Self {
        Self { coords: Vector4::new(0.0, 0.0, 0.0, 1.0) }
    }

    /// Builds a quaternion from raw components, normalizing and fixing the
    /// sign so that `w ≥ 0`.
    pub fn new_normalize(x: f64, y: f64, z: f64, w: f64) -> Self {
        let mut coords = Vector4::new(x, y, z, w);
        let n = coords.norm();
        coords /= n;
        if coords.w < 0.0 {
            coords = -coords;
        }
        Self { coords }
    }

    pub fn x(&self) -> f64 {
        self.coords.x
    }
    pub fn y(&self) -> f64 {
        self.coords.y
    }
    pub fn z(&self) -> f64 {
        self.coords.z
    }
    pub fn w(&self) -> f64 {
        self.coords.w
    }

    pub fn vec(&self) -> Vector3<f64> {
        self.coords.xyz()
    }

    pub fn coords(&self) -> &Vector4<f64> {
        &self.coords
    }

    /// Quaternion of the error rotation `δθ`, with `R = Exp(−δθ) ≈ I − ⌊δθ⌋`.
    pub fn from_rotvec(dtheta: &Vector3<f64>) -> Self {
        let theta = dtheta.norm();
        if theta < 1e-12 {
            return Self::new_normalize(0.5 * dtheta.x, 0.5 * dtheta.y, 0.5 * dtheta.z, 1.0);
        }
        let s = (0.5 * theta).sin() / theta;
        Self::new_normalize(s * dtheta.x, s * dtheta.y, s * dtheta.z, (0.5 * theta).cos())
    }

    /// Inverse of [`UnitQuatJPL::from_rotvec`] for rotations below π.
    pub fn to_rotvec(&self) -> Vector3<f64> {
        let (v, w) = if self.coords.w < 0.0 { (-self.vec(), -self.coords.w) } else { (self.vec(), self.coords.w) };
        let s = v.norm();
        if s < 1e-12 {
            return 2.0 * v;
        }
        let theta = 2.0 * s.atan2(w);
        v * (theta / s)
    }

    pub fn to_rot(&self) -> Matrix3<f64> {
        let v = self.vec();
        let w = self.coords.w;
        (2.0 * w * w - 1.0) * Matrix3::identity() - 2.0 * w * skew(&v) + 2.0 * v * v.transpose()
    }

    /// JPL quaternion of a rotation matrix. The JPL matrix of `q` is the
    /// transpose of the Hamilton matrix of the same components.
    pub fn from_rot(r: &Matrix3<f64>) -> Self {
        let h = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r.transpose()));
        Self::new_normalize(h.i, h.j, h.k, h.w)
    }

    pub fn inverse(&self) -> Self {
        Self { coords: Vector4::new(-self.coords.x, -self.coords.y, -self.coords.z, self.coords.w) }
    }

    /// JPL product `self ⊗ rhs`.
    pub fn mul(&self, rhs: &Self) -> Self {
        let qv = self.vec();
        let pv = rhs.vec();
        let qw = self.coords.w;
        let pw = rhs.coords.w;
        let v = qw * pv + pw * qv - qv.cross(&pv);
        let w = qw * pw - qv.dot(&pv);
        Self::new_normalize(v.x, v.y, v.z, w)
    }

    /// Angle of the rotation in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.to_rotvec().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c.is_finite())
    }
}

impl std::ops::Mul for UnitQuatJPL {
    type Output = UnitQuatJPL;
    fn mul(self, rhs: Self) -> Self {
        UnitQuatJPL::mul(&self, &rhs)
    }
}

/// Rotation matrix of a JPL quaternion.
pub fn quat_to_rot(q: &UnitQuatJPL) -> Matrix3<f64> {
    q.to_rot()
}

/// Rigid transform `ᴬT_B`.
///
/// `rot` holds `ᴮq_A` (maps `A`-frame vectors into `B`), `trans` holds `ᴬp_B`,
/// the origin of `B` expressed in `A`. A point is carried from `B` to `A` by
/// `p_A = ᴮR_Aᵀ·p_B + ᴬp_B`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rot: UnitQuatJPL,
    pub trans: Vector3<f64>,
}

impl Pose {
    pub fn new(rot: UnitQuatJPL, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    /// Builds `ᴬT_B` from `ᴬR_B` (the body-to-parent rotation) and `ᴬp_B`.
    pub fn from_parent_rotation(r_ab: &Matrix3<f64>, trans: Vector3<f64>) -> Self {
        Self { rot: UnitQuatJPL::from_rot(&r_ab.transpose()), trans }
    }

    /// `ᴮR_A`.
    pub fn rot_mat(&self) -> Matrix3<f64> {
        self.rot.to_rot()
    }

    /// `p_A` from `p_B`.
    pub fn transform_point(&self, p_b: &Vector3<f64>) -> Vector3<f64> {
        self.rot_mat().transpose() * p_b + self.trans
    }

    /// `p_B` from `p_A`.
    pub fn inverse_transform_point(&self, p_a: &Vector3<f64>) -> Vector3<f64> {
        self.rot_mat() * (p_a - self.trans)
    }

    /// `ᴬT_B ∘ ᴮT_C = ᴬT_C`.
    pub fn compose(&self, b: &Pose) -> Pose {
        Pose { rot: b.rot * self.rot, trans: self.trans + self.rot_mat().transpose() * b.trans }
    }

    /// `(ᴬT_B)⁻¹ = ᴮT_A`.
    pub fn inverse(&self) -> Pose {
        Pose { rot: self.rot.inverse(), trans: -(self.rot_mat() * self.trans) }
    }

    /// Applies a 6-dof error `(δθ, δp)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let dtheta = delta.fixed_rows::<3>(0).into_owned();
        let dp = delta.fixed_rows::<3>(3).into_owned();
        let rot = if dtheta == Vector3::zeros() { self.rot } else { UnitQuatJPL::from_rotvec(&dtheta) * self.rot };
        Pose { rot, trans: self.trans + dp }
    }

    /// Error `(δθ, δp)` such that `base.retract(δ) == self`.
    pub fn lift(&self, base: &Pose) -> Vector6<f64> {
        let dtheta = (self.rot * base.rot.inverse()).to_rotvec();
        let dp = self.trans - base.trans;
        let mut out = Vector6::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&dtheta);
        out.fixed_rows_mut::<3>(3).copy_from(&dp);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.rot.is_finite() && self.trans.iter().all(|c| c.is_finite())
    }

    /// Jacobians of `a ∘ b` with respect to the errors of `a` and of `b`.
    pub fn compose_jacobians(a: &Pose, b: &Pose) -> (Matrix6<f64>, Matrix6<f64>) {
        let ra_t = a.rot_mat().transpose();
        let mut ja = Matrix6::identity();
        ja.fixed_view_mut::<3, 3>(0, 0).copy_from(&b.rot_mat());
        ja.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ra_t * skew(&b.trans)));
        let mut jb = Matrix6::identity();
        jb.fixed_view_mut::<3, 3>(3, 3).copy_from(&ra_t);
        (ja, jb)
    }

    /// Jacobian of `self⁻¹` with respect to the error of `self`.
    pub fn inverse_jacobian(&self) -> Matrix6<f64> {
        let r = self.rot_mat();
        let mut j = Matrix6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r.transpose()));
        j.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&self.inverse().trans));
        j.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-r));
        j
    }
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn pose_inverse(a: &Pose) -> Pose {
    a.inverse()
}

/// Ideal pinhole camera with a fixed IMU-to-camera extrinsic `ᴵT_C`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsic: Pose,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, extrinsic: Pose) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        Self { fx, fy, cx, cy, extrinsic }
    }

    /// Pixel coordinates of a camera-frame point, `None` when the point is
    /// not in front of the camera.
    pub fn project(&self, p_c: &Vector3<f64>) -> Option<Vector2<f64>> {
        if !(p_c.z > MIN_DEPTH) {
            return None;
        }
        Some(Vector2::new(self.fx * p_c.x / p_c.z + self.cx, self.fy * p_c.y / p_c.z + self.cy))
    }

    /// Jacobian of [`PinholeCamera::project`] w.r.t. the camera-frame point.
    pub fn project_jacobian(&self, p_c: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p_c.z;
        let iz2 = iz * iz;
        Matrix2x3::new(self.fx * iz, 0.0, -self.fx * p_c.x * iz2, 0.0, self.fy * iz, -self.fy * p_c.y * iz2)
    }

    /// Normalized bearing `(x/z, y/z, 1)` of a pixel.
    pub fn unproject(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    pub fn with_extrinsic(&self, extrinsic: Pose) -> Self {
        Self { extrinsic, ..*self }
    }
}

pub fn project(cam: &PinholeCamera, p_c: &Vector3<f64>) -> Option<Vector2<f64>> {
    cam.project(p_c)
}
