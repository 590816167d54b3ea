//! Rigid-body math and the canonical pallet face model.
//!
//! Conventions used throughout the crate:
//!
//! * camera frame: +x right, +y down, +z forward;
//! * a [`Pose`] maps points from an object frame (the pallet face, a marker,
//!   a calibration board) into the camera frame: `p_cam = R * p_obj + t`;
//! * Euler angles are intrinsic Z-Y-X, `R = Rz(rz) * Ry(ry) * Rx(rx)`, in
//!   degrees, each wrapped to `(-180, 180]`.

use nalgebra::{Matrix3, Point2 as NPoint2, Point3 as NPoint3, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::scalar::{lit, to_f64, Real};

pub type Point2<T> = NPoint2<T>;
pub type Point3<T> = NPoint3<T>;

/// Tolerance used when validating a rotation read from an external source.
pub const ROTATION_INPUT_TOL: f64 = 1e-6;

/// Which face of a Euro-pallet a keypoint quad belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceKind {
    /// Long face, 1200 x 144 mm. Class id 0.
    Front,
    /// Short face, 800 x 144 mm. Class id 1.
    Side,
}

impl FaceKind {
    pub fn class_id(self) -> u32 {
        match self {
            FaceKind::Front => 0,
            FaceKind::Side => 1,
        }
    }

    pub fn from_class_id(id: u32) -> Option<Self> {
        match id {
            0 => Some(FaceKind::Front),
            1 => Some(FaceKind::Side),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FaceKind::Front => "front",
            FaceKind::Side => "side",
        }
    }
}

impl std::str::FromStr for FaceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "front" => Ok(FaceKind::Front),
            "side" => Ok(FaceKind::Side),
            other => Err(format!("unknown face kind `{other}` (expected front|side)")),
        }
    }
}

/// Planar rectangle of a pallet face, centred on the origin of its own frame
/// with the face lying in `z = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PalletFaceModel<T: Real> {
    pub kind: FaceKind,
    pub width: T,
    pub height: T,
}

impl<T: Real> PalletFaceModel<T> {
    pub fn new(kind: FaceKind) -> Self {
        let (w, h) = match kind {
            FaceKind::Front => (1.200, 0.144),
            FaceKind::Side => (0.800, 0.144),
        };
        Self {
            kind,
            width: lit(w),
            height: lit(h),
        }
    }

    pub fn front() -> Self {
        Self::new(FaceKind::Front)
    }

    pub fn side() -> Self {
        Self::new(FaceKind::Side)
    }

    /// Corners in TL, TR, BR, BL order.
    pub fn canonical_corners(&self) -> [Point3<T>; 4] {
        rectangle_corners(self.width, self.height)
    }
}

/// Corners of a `width x height` rectangle centred on the origin in `z = 0`,
/// ordered TL, TR, BR, BL (x right, y down).
pub fn rectangle_corners<T: Real>(width: T, height: T) -> [Point3<T>; 4] {
    let hw = width * lit(0.5);
    let hh = height * lit(0.5);
    let z = T::zero();
    [
        Point3::new(-hw, -hh, z),
        Point3::new(hw, -hh, z),
        Point3::new(hw, hh, z),
        Point3::new(-hw, hh, z),
    ]
}

/// Convenience wrapper over [`PalletFaceModel::canonical_corners`].
pub fn canonical_corners<T: Real>(model: &PalletFaceModel<T>) -> [Point3<T>; 4] {
    model.canonical_corners()
}

/// Rigid transform from an object frame into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    /// Builds a pose, projecting `rotation` onto SO(3).
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: project_to_so3(&rotation),
            translation,
        }
    }

    /// Builds a pose without re-orthonormalising; the caller guarantees
    /// `rotation` is already a proper rotation.
    pub fn from_parts(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::from_parts(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self::from_parts(Matrix3::identity(), translation)
    }

    pub fn from_euler(euler: &EulerAngles<T>, translation: Vector3<T>) -> Self {
        Self::from_parts(euler_to_rotation(euler), translation)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        Pose::from_parts(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose<T> {
        let rt = self.rotation.transpose();
        Pose::from_parts(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Point3<T>) -> Point3<T> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Left perturbation `exp([omega]x) * R`, `t + dt`.
    pub fn perturbed(&self, omega: &Vector3<T>, dt: &Vector3<T>) -> Pose<T> {
        Pose::from_parts(exp_so3(omega) * self.rotation, self.translation + dt)
    }

    /// Geodesic angle (radians) between the two rotations.
    pub fn rotation_angle_to(&self, other: &Pose<T>) -> T {
        rotation_angle(&(self.rotation * other.rotation.transpose()))
    }

    pub fn translation_distance_to(&self, other: &Pose<T>) -> T {
        (self.translation - other.translation).norm()
    }

    /// Frobenius norms of `RᵀR - I` and `|det R - 1|`.
    pub fn orthonormality_defect(&self) -> (T, T) {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        let det = (r.determinant() - T::one()).abs();
        (ortho, det)
    }

    pub fn is_valid(&self, tol: T) -> bool {
        let (o, d) = self.orthonormality_defect();
        o <= tol && d <= tol && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn euler(&self) -> EulerAngles<T> {
        rotation_to_euler(&self.rotation)
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<T> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn from_quaternion(q: &UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Self::from_parts(q.to_rotation_matrix().into_inner(), translation)
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose::from_parts(
            self.rotation.map(|v| lit::<U>(to_f64(v))),
            self.translation.map(|v| lit::<U>(to_f64(v))),
        )
    }
}

pub fn compose<T: Real>(a: &Pose<T>, b: &Pose<T>) -> Pose<T> {
    a.compose(b)
}

pub fn invert<T: Real>(p: &Pose<T>) -> Pose<T> {
    p.inverse()
}

/// Closest rotation in Frobenius norm (`U Vᵀ` with determinant correction).
pub fn project_to_so3<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u requested");
    let v_t = svd.v_t.expect("svd v_t requested");
    let mut r = u * v_t;
    if r.determinant() < T::zero() {
        let mut u_fixed = u;
        // Flip the column paired with the smallest singular value.
        let (min_idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, T::max_value().unwrap()), |(bi, bv), (i, &v)| {
                if v < bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        u_fixed.column_mut(min_idx).neg_mut();
        r = u_fixed * v_t;
    }
    r
}

pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// Rodrigues formula for the rotation `exp([omega]x)`.
pub fn exp_so3<T: Real>(omega: &Vector3<T>) -> Matrix3<T> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let k2 = k * k;
    let (a, b) = if theta2 < lit(1e-12) {
        // Taylor expansions of sin(θ)/θ and (1 - cos θ)/θ².
        (
            T::one() - theta2 / lit(6.0),
            lit::<T>(0.5) - theta2 / lit(24.0),
        )
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k2 * b
}

/// Rotation angle in radians of a rotation matrix, robust near 0 and π.
pub fn rotation_angle<T: Real>(r: &Matrix3<T>) -> T {
    // atan2(|axis*sinθ|, cosθ) keeps precision at small angles where acos
    // of the trace would lose half the digits.
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin_theta = s.norm() * lit(0.5);
    let cos_theta = (r.trace() - T::one()) * lit(0.5);
    sin_theta.atan2(cos_theta)
}

pub fn rot_x<T: Real>(rad: T) -> Matrix3<T> {
    let (s, c) = rad.sin_cos();
    let (o, l) = (T::zero(), T::one());
    Matrix3::new(l, o, o, o, c, -s, o, s, c)
}

pub fn rot_y<T: Real>(rad: T) -> Matrix3<T> {
    let (s, c) = rad.sin_cos();
    let (o, l) = (T::zero(), T::one());
    Matrix3::new(c, o, s, o, l, o, -s, o, c)
}

pub fn rot_z<T: Real>(rad: T) -> Matrix3<T> {
    let (s, c) = rad.sin_cos();
    let (o, l) = (T::zero(), T::one());
    Matrix3::new(c, -s, o, s, c, o, o, o, l)
}

/// Intrinsic Z-Y-X Euler angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles<T: Real> {
    pub rx: T,
    pub ry: T,
    pub rz: T,
    /// Set when the decomposition hit |ry| = 90°; `rz` is then forced to 0.
    pub gimbal_lock: bool,
}

impl<T: Real> EulerAngles<T> {
    pub fn new(rx: T, ry: T, rz: T) -> Self {
        Self {
            rx,
            ry,
            rz,
            gimbal_lock: false,
        }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }
}

pub const EULER_CONVENTION: &str = "intrinsic Z-Y-X (R = Rz(rz)*Ry(ry)*Rx(rx)), degrees";

/// Wraps an angle in degrees to `(-180, 180]`.
pub fn wrap_degrees<T: Real>(deg: T) -> T {
    let full = lit::<T>(360.0);
    let half = lit::<T>(180.0);
    let mut a = deg % full;
    if a <= -half {
        a += full;
    } else if a > half {
        a -= full;
    }
    a
}

pub fn euler_to_rotation<T: Real>(e: &EulerAngles<T>) -> Matrix3<T> {
    let d2r = T::pi() / lit(180.0);
    rot_z(e.rz * d2r) * rot_y(e.ry * d2r) * rot_x(e.rx * d2r)
}

pub fn rotation_to_euler<T: Real>(r: &Matrix3<T>) -> EulerAngles<T> {
    let r2d = lit::<T>(180.0) / T::pi();
    let sy = -r[(2, 0)];
    // cos(ry) below ~1e-9 rad: roll and yaw are no longer separable.
    let cy = (r[(0, 0)] * r[(0, 0)] + r[(1, 0)] * r[(1, 0)]).sqrt();
    if cy < lit(1e-9) {
        let ry = if sy > T::zero() {
            T::frac_pi_2()
        } else {
            -T::frac_pi_2()
        };
        // With rz = 0: R = Ry(±90)·Rx(rx); r01 = ±sin(rx)·..., r11 = cos(rx).
        let rx = (sy * r[(0, 1)]).atan2(r[(1, 1)]);
        return EulerAngles {
            rx: wrap_degrees(rx * r2d),
            ry: ry * r2d,
            rz: T::zero(),
            gimbal_lock: true,
        };
    }
    let ry = sy.atan2(cy);
    let rx = r[(2, 1)].atan2(r[(2, 2)]);
    let rz = r[(1, 0)].atan2(r[(0, 0)]);
    EulerAngles {
        rx: wrap_degrees(rx * r2d),
        ry: wrap_degrees(ry * r2d),
        rz: wrap_degrees(rz * r2d),
        gimbal_lock: false,
    }
}

/// On-disk pose representation: row-major rotation and translation in metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation_m: [f64; 3],
}

impl<T: Real> From<&Pose<T>> for PoseRecord {
    fn from(p: &Pose<T>) -> Self {
        let r = &p.rotation;
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = to_f64(r[(i, j)]);
            }
        }
        PoseRecord {
            rotation,
            translation_m: [
                to_f64(p.translation.x),
                to_f64(p.translation.y),
                to_f64(p.translation.z),
            ],
        }
    }
}

impl PoseRecord {
    pub fn to_pose<T: Real>(&self) -> Result<Pose<T>, String> {
        if !self
            .rotation
            .iter()
            .chain(self.translation_m.iter())
            .all(|v| v.is_finite())
        {
            return Err("pose contains non-finite values".into());
        }
        let r = Matrix3::from_row_slice(&self.rotation);
        let raw = Pose::from_parts(r, Vector3::from_row_slice(&self.translation_m));
        if !raw.is_valid(ROTATION_INPUT_TOL) {
            return Err("rotation is not orthonormal with det +1".into());
        }
        let projected = Pose::new(raw.rotation, raw.translation);
        Ok(projected.cast())
    }
}

impl<T: Real> Serialize for Pose<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PoseRecord::from(self).serialize(serializer)
    }
}

impl<'de, T: Real> Deserialize<'de> for Pose<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rec = PoseRecord::deserialize(deserializer)?;
        rec.to_pose().map_err(serde::de::Error::custom)
    }
}
