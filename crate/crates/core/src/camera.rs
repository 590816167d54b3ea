//! Pinhole camera with Brown–Conrady distortion, normalised DLT homography
//! estimation and planar-target (Zhang) calibration.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SMatrix, Vector2, Vector3};
use thiserror::Error;

use crate::geom::{project_to_so3, skew, Point2, Point3, Pose};
use crate::lm::{self, LeastSquares, LmOptions, LmStatus};
use crate::scalar::{lit, to_f64, Real};

/// Undistortion stops once the normalised-coordinate update is below this.
pub const UNDISTORT_TOL: f64 = 1e-10;
pub const UNDISTORT_MAX_ITERS: usize = 20;
/// Minimum camera-frame depth accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CameraError {
    #[error("behind-camera: point depth {0} is not in front of the camera")]
    BehindCamera(f64),
    #[error("undistort-divergence: distortion inversion did not converge")]
    UndistortDivergence,
    #[error("degenerate-configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub skew: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            skew: T::zero(),
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.skew]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(CameraError::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= T::zero() || self.fy <= T::zero() {
            return Err(CameraError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        let w = lit::<T>(self.width as f64);
        let h = lit::<T>(self.height as f64);
        if self.cx < T::zero() || self.cx > w || self.cy < T::zero() || self.cy > h {
            return Err(CameraError::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<T> {
        let (o, l) = (T::zero(), T::one());
        Matrix3::new(self.fx, self.skew, self.cx, o, self.fy, self.cy, o, o, l)
    }

    pub fn diagonal(&self) -> T {
        lit::<T>((self.width as f64).hypot(self.height as f64))
    }

    /// Maps distorted normalised coordinates to pixels.
    pub fn to_pixel(&self, xd: &Vector2<T>) -> Point2<T> {
        Point2::new(
            self.fx * xd.x + self.skew * xd.y + self.cx,
            self.fy * xd.y + self.cy,
        )
    }

    /// Inverse of [`Intrinsics::to_pixel`].
    pub fn to_normalized(&self, px: &Point2<T>) -> Vector2<T> {
        let y = (px.y - self.cy) / self.fy;
        let x = (px.x - self.cx - self.skew * y) / self.fx;
        Vector2::new(x, y)
    }

    pub fn contains(&self, px: &Point2<T>, margin: T) -> bool {
        let w = lit::<T>(self.width as f64);
        let h = lit::<T>(self.height as f64);
        px.x >= margin && px.y >= margin && px.x <= w - margin && px.y <= h - margin
    }

    pub fn cast<U: Real>(&self) -> Intrinsics<U> {
        Intrinsics {
            fx: lit(to_f64(self.fx)),
            fy: lit(to_f64(self.fy)),
            cx: lit(to_f64(self.cx)),
            cy: lit(to_f64(self.cy)),
            skew: lit(to_f64(self.skew)),
            width: self.width,
            height: self.height,
        }
    }
}

/// Brown–Conrady distortion: three radial and two tangential terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distortion<T: Real> {
    pub k1: T,
    pub k2: T,
    pub k3: T,
    pub p1: T,
    pub p2: T,
}

impl<T: Real> Default for Distortion<T> {
    fn default() -> Self {
        Self::zero()
    }
}

impl<T: Real> Distortion<T> {
    pub fn zero() -> Self {
        let z = T::zero();
        Self {
            k1: z,
            k2: z,
            k3: z,
            p1: z,
            p2: z,
        }
    }

    pub fn radial(k1: T, k2: T, k3: T) -> Self {
        Self {
            k1,
            k2,
            k3,
            ..Self::zero()
        }
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients().iter().all(|c| *c == T::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.coefficients().iter().all(|c| c.is_finite())
    }

    pub fn coefficients(&self) -> [T; 5] {
        [self.k1, self.k2, self.k3, self.p1, self.p2]
    }

    pub fn distort(&self, p: &Vector2<T>) -> Vector2<T> {
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let radial = T::one() + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let two = lit::<T>(2.0);
        let xy = x * y;
        Vector2::new(
            x * radial + two * self.p1 * xy + self.p2 * (r2 + two * x * x),
            y * radial + self.p1 * (r2 + two * y * y) + two * self.p2 * xy,
        )
    }

    /// Jacobian of [`Distortion::distort`] with respect to the undistorted
    /// normalised point.
    pub fn jacobian(&self, p: &Vector2<T>) -> Matrix2<T> {
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let radial = T::one() + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let two = lit::<T>(2.0);
        let d_radial = self.k1 + r2 * (two * self.k2 + lit::<T>(3.0) * r2 * self.k3);
        let six = lit::<T>(6.0);
        Matrix2::new(
            radial + two * x * x * d_radial + two * self.p1 * y + six * self.p2 * x,
            two * x * y * d_radial + two * self.p1 * x + two * self.p2 * y,
            two * x * y * d_radial + two * self.p1 * x + two * self.p2 * y,
            radial + two * y * y * d_radial + six * self.p1 * y + two * self.p2 * x,
        )
    }

    /// Jacobian of the distorted point with respect to `(k1, k2, k3, p1, p2)`.
    pub fn coefficient_jacobian(&self, p: &Vector2<T>) -> SMatrix<T, 2, 5> {
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let r4 = r2 * r2;
        let r6 = r4 * r2;
        let two = lit::<T>(2.0);
        SMatrix::<T, 2, 5>::new(
            x * r2,
            x * r4,
            x * r6,
            two * x * y,
            r2 + two * x * x,
            y * r2,
            y * r4,
            y * r6,
            r2 + two * y * y,
            two * x * y,
        )
    }

    /// Inverts the distortion with a damped Newton iteration.
    pub fn undistort(&self, target: &Vector2<T>) -> Result<Vector2<T>, CameraError> {
        if self.is_zero() {
            return Ok(*target);
        }
        let tol = lit::<T>(UNDISTORT_TOL);
        let mut p = *target;
        let mut err = self.distort(&p) - target;
        for _ in 0..UNDISTORT_MAX_ITERS {
            if err.norm() <= tol * lit(1e-3) {
                break;
            }
            let Some(j_inv) = self.jacobian(&p).try_inverse() else {
                return Err(CameraError::UndistortDivergence);
            };
            let step = j_inv * err;
            // Halve the step until the residual shrinks.
            let mut alpha = T::one();
            let mut accepted = false;
            for _ in 0..8 {
                let cand = p - step * alpha;
                let cand_err = self.distort(&cand) - target;
                if cand_err.norm() < err.norm() {
                    p = cand;
                    err = cand_err;
                    accepted = true;
                    break;
                }
                alpha *= lit(0.5);
            }
            if !accepted || step.norm() * alpha <= tol * lit(1e-3) {
                break;
            }
        }
        if err.norm() <= tol && p.iter().all(|v| v.is_finite()) {
            Ok(p)
        } else {
            Err(CameraError::UndistortDivergence)
        }
    }

    pub fn cast<U: Real>(&self) -> Distortion<U> {
        Distortion {
            k1: lit(to_f64(self.k1)),
            k2: lit(to_f64(self.k2)),
            k3: lit(to_f64(self.k3)),
            p1: lit(to_f64(self.p1)),
            p2: lit(to_f64(self.p2)),
        }
    }
}

/// Projects a point already expressed in the camera frame.
pub fn project_camera_point<T: Real>(
    intr: &Intrinsics<T>,
    dist: &Distortion<T>,
    pc: &Point3<T>,
) -> Result<Point2<T>, CameraError> {
    if !(pc.z > lit(MIN_DEPTH)) {
        return Err(CameraError::BehindCamera(to_f64(pc.z)));
    }
    let n = Vector2::new(pc.x / pc.z, pc.y / pc.z);
    Ok(intr.to_pixel(&dist.distort(&n)))
}

/// Projects an object-frame point through `pose` into pixels.
pub fn project<T: Real>(
    intr: &Intrinsics<T>,
    dist: &Distortion<T>,
    pose: &Pose<T>,
    p: &Point3<T>,
) -> Result<Point2<T>, CameraError> {
    project_camera_point(intr, dist, &pose.transform_point(p))
}

/// Ray `(x, y, 1)` in the camera frame through an observed pixel.
pub fn unproject<T: Real>(
    intr: &Intrinsics<T>,
    dist: &Distortion<T>,
    pixel: &Point2<T>,
) -> Result<Vector3<T>, CameraError> {
    if !(pixel.x.is_finite() && pixel.y.is_finite()) {
        return Err(CameraError::UndistortDivergence);
    }
    let n = dist.undistort(&intr.to_normalized(pixel))?;
    Ok(Vector3::new(n.x, n.y, T::one()))
}

/// Analytic derivatives of a projected pixel.
#[derive(Debug, Clone)]
pub struct ProjectionJacobian<T: Real> {
    pub pixel: Point2<T>,
    /// d pixel / d camera-frame point.
    pub wrt_point: SMatrix<T, 2, 3>,
    /// d pixel / d (fx, fy, cx, cy, skew, k1, k2, k3, p1, p2).
    pub wrt_intrinsics: SMatrix<T, 2, 10>,
}

pub fn projection_jacobian<T: Real>(
    intr: &Intrinsics<T>,
    dist: &Distortion<T>,
    pc: &Point3<T>,
) -> Result<ProjectionJacobian<T>, CameraError> {
    if !(pc.z > lit(MIN_DEPTH)) {
        return Err(CameraError::BehindCamera(to_f64(pc.z)));
    }
    let iz = T::one() / pc.z;
    let n = Vector2::new(pc.x * iz, pc.y * iz);
    let d = dist.distort(&n);
    let pixel = intr.to_pixel(&d);
    let k2 = Matrix2::new(intr.fx, intr.skew, T::zero(), intr.fy);
    let dn_dp = SMatrix::<T, 2, 3>::new(iz, T::zero(), -n.x * iz, T::zero(), iz, -n.y * iz);
    let wrt_point = k2 * dist.jacobian(&n) * dn_dp;
    let dcoef = k2 * dist.coefficient_jacobian(&n);
    let (o, l) = (T::zero(), T::one());
    let mut wrt_intrinsics = SMatrix::<T, 2, 10>::zeros();
    // fx, fy, cx, cy, skew
    wrt_intrinsics[(0, 0)] = d.x;
    wrt_intrinsics[(1, 0)] = o;
    wrt_intrinsics[(1, 1)] = d.y;
    wrt_intrinsics[(0, 2)] = l;
    wrt_intrinsics[(1, 3)] = l;
    wrt_intrinsics[(0, 4)] = d.y;
    wrt_intrinsics
        .fixed_view_mut::<2, 5>(0, 5)
        .copy_from(&dcoef);
    Ok(ProjectionJacobian {
        pixel,
        wrt_point,
        wrt_intrinsics,
    })
}

/// Similarity transform moving points to zero mean and mean distance √2.
fn hartley_normalization<T: Real>(pts: &[Point2<T>]) -> Option<Matrix3<T>> {
    let n = lit::<T>(pts.len() as f64);
    let c = pts
        .iter()
        .fold(Vector2::zeros(), |acc: Vector2<T>, p| acc + p.coords)
        / n;
    let mean_dist = pts.iter().map(|p| (p.coords - c).norm()).fold(T::zero(), |a, b| a + b) / n;
    if !(mean_dist > T::zero()) || !mean_dist.is_finite() {
        return None;
    }
    let s = T::sqrt(lit(2.0)) / mean_dist;
    let (o, l) = (T::zero(), T::one());
    Some(Matrix3::new(s, o, -s * c.x, o, s, -s * c.y, o, o, l))
}

fn apply_h<T: Real>(h: &Matrix3<T>, p: &Point2<T>) -> Point2<T> {
    let v = h * Vector3::new(p.x, p.y, T::one());
    Point2::new(v.x / v.z, v.y / v.z)
}

/// True when `a`, `b`, `c` are collinear relative to the scale of the
/// triangle's edges.
pub fn collinear<T: Real>(a: &Point2<T>, b: &Point2<T>, c: &Point2<T>, rel_tol: T) -> bool {
    let ab = b - a;
    let ac = c - a;
    let cross = ab.x * ac.y - ab.y * ac.x;
    let scale = ab.norm() * ac.norm();
    scale == T::zero() || cross.abs() <= rel_tol * scale
}

fn any_three_collinear<T: Real>(pts: &[Point2<T>], rel_tol: T) -> bool {
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if collinear(&pts[i], &pts[j], &pts[k], rel_tol) {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalised DLT homography mapping `plane` points onto `image` points.
///
/// The result is scaled to Frobenius norm √3 with a non-negative `H[2][2]`
/// (largest-magnitude entry positive when `H[2][2]` vanishes).
pub fn homography_dlt<T: Real>(
    plane: &[Point2<T>],
    image: &[Point2<T>],
) -> Result<Matrix3<T>, CameraError> {
    if plane.len() != image.len() {
        return Err(CameraError::DegenerateConfiguration(format!(
            "{} plane points vs {} image points",
            plane.len(),
            image.len()
        )));
    }
    let n = plane.len();
    if n < 4 {
        return Err(CameraError::DegenerateConfiguration(format!(
            "homography needs at least 4 correspondences, got {n}"
        )));
    }
    if n == 4 && any_three_collinear(plane, lit(1e-9)) {
        return Err(CameraError::DegenerateConfiguration(
            "three plane points are collinear".into(),
        ));
    }
    let degenerate = || CameraError::DegenerateConfiguration("rank-deficient DLT system".into());
    let tp = hartley_normalization(plane).ok_or_else(degenerate)?;
    let ti = hartley_normalization(image).ok_or_else(degenerate)?;

    // Pad to at least 9 rows so the SVD exposes the full right null space.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<T>::zeros(rows, 9);
    for (k, (p, q)) in plane.iter().zip(image).enumerate() {
        let p = apply_h(&tp, p);
        let q = apply_h(&ti, q);
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let (o, l) = (T::zero(), T::one());
        let r0 = [-x, -y, -l, o, o, o, u * x, u * y, u];
        let r1 = [o, o, o, -x, -y, -l, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * k, c)] = r0[c];
            a[(2 * k + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(degenerate)?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].partial_cmp(&sv[j]).unwrap_or(std::cmp::Ordering::Equal));
    let smallest = order[0];
    let second = order[1];
    let largest = order[order.len() - 1];
    if !(sv[second] > sv[largest] * lit(1e-10)) {
        return Err(degenerate());
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let ti_inv = ti.try_inverse().ok_or_else(degenerate)?;
    Ok(normalize_homography(&(ti_inv * hn * tp)))
}

pub fn normalize_homography<T: Real>(h: &Matrix3<T>) -> Matrix3<T> {
    let mut out = h * (T::sqrt(lit(3.0)) / h.norm());
    let pivot = if out[(2, 2)].abs() > lit(1e-12) {
        out[(2, 2)]
    } else {
        out.iter().copied().fold(T::zero(), |a, b| if b.abs() > a.abs() { b } else { a })
    };
    if pivot < T::zero() {
        out.neg_mut();
    }
    out
}

/// One image of a planar target: board coordinates (metres, `z = 0`) paired
/// with observed pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarView<T: Real> {
    pub board: Vec<Point2<T>>,
    pub image: Vec<Point2<T>>,
}

impl<T: Real> PlanarView<T> {
    pub fn new(board: Vec<Point2<T>>, image: Vec<Point2<T>>) -> Self {
        Self { board, image }
    }

    pub fn len(&self) -> usize {
        self.board.len()
    }

    pub fn is_empty(&self) -> bool {
        self.board.is_empty()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.board.len() != self.image.len() {
            return Err("board/image length mismatch".into());
        }
        if self.board.len() < 4 {
            return Err(format!("need at least 4 points, got {}", self.board.len()));
        }
        let finite = self
            .board
            .iter()
            .chain(&self.image)
            .all(|p| p.x.is_finite() && p.y.is_finite());
        if !finite {
            return Err("non-finite coordinate".into());
        }
        let a = &self.board[0];
        let all_collinear = self.board.iter().skip(1).all(|b| {
            self.board
                .iter()
                .skip(1)
                .all(|c| collinear(a, b, c, lit(1e-9)))
        });
        if all_collinear {
            return Err("board points are collinear".into());
        }
        Ok(())
    }
}

/// Output of [`calibrate_zhang`].
#[derive(Debug, Clone)]
pub struct Calibration<T: Real> {
    pub intrinsics: Intrinsics<T>,
    pub distortion: Distortion<T>,
    /// Board-to-camera pose of each view, in input order.
    pub poses: Vec<Pose<T>>,
    pub rms_px: T,
    /// RMS of the closed-form initialisation (zero distortion, zero skew).
    pub initial_rms_px: T,
    pub iterations: usize,
}

#[derive(Debug, Error)]
pub enum CalibrationError<T: Real> {
    #[error("insufficient-views: need at least 3 views, got {0}")]
    InsufficientViews(usize),
    #[error("invalid view {index}: {reason}")]
    InvalidView { index: usize, reason: String },
    #[error("degenerate-configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no-convergence: refinement stopped at rms {:.6} px", to_f64(.0.rms_px))]
    NoConvergence(Box<Calibration<T>>),
}

impl<T: Real> From<CameraError> for CalibrationError<T> {
    fn from(e: CameraError) -> Self {
        match e {
            CameraError::DegenerateConfiguration(m) => CalibrationError::DegenerateConfiguration(m),
            other => CalibrationError::DegenerateConfiguration(other.to_string()),
        }
    }
}

/// Zhang's `v_ij` constraint row for the image of the absolute conic.
fn conic_row<T: Real>(h: &Matrix3<T>, i: usize, j: usize) -> [T; 6] {
    let hi = h.column(i);
    let hj = h.column(j);
    [
        hi[0] * hj[0],
        hi[0] * hj[1] + hi[1] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    ]
}

/// Closed-form intrinsics from per-view homographies (pixel coordinates
/// pre-conditioned by `cond`).
fn closed_form_intrinsics<T: Real>(
    homographies: &[Matrix3<T>],
) -> Result<Matrix3<T>, CameraError> {
    let rows = (2 * homographies.len()).max(6);
    let mut v = DMatrix::<T>::zeros(rows, 6);
    for (k, h) in homographies.iter().enumerate() {
        let h = h / h.norm();
        let v12 = conic_row(&h, 0, 1);
        let v11 = conic_row(&h, 0, 0);
        let v22 = conic_row(&h, 1, 1);
        for c in 0..6 {
            v[(2 * k, c)] = v12[c];
            v[(2 * k + 1, c)] = v11[c] - v22[c];
        }
    }
    let svd = v.svd(false, true);
    let degenerate =
        || CameraError::DegenerateConfiguration("views do not constrain the intrinsics".into());
    let v_t = svd.v_t.ok_or_else(degenerate)?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].partial_cmp(&sv[j]).unwrap_or(std::cmp::Ordering::Equal));
    if !(sv[order[1]] > sv[order[5]] * lit(1e-9)) {
        return Err(degenerate());
    }
    let b = v_t.row(order[0]);
    let (b11, b12, b22, b13, b23, b33) = (b[0], b[1], b[2], b[3], b[4], b[5]);
    let den = b11 * b22 - b12 * b12;
    if !(den.abs() > T::zero()) || b11 == T::zero() {
        return Err(degenerate());
    }
    let v0 = (b12 * b13 - b11 * b23) / den;
    let lambda = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11;
    let alpha2 = lambda / b11;
    let beta2 = lambda * b11 / den;
    if !(alpha2 > T::zero() && beta2 > T::zero()) {
        return Err(degenerate());
    }
    let alpha = alpha2.sqrt();
    let beta = beta2.sqrt();
    let gamma = -b12 * alpha2 * beta / lambda;
    let u0 = gamma * v0 / beta - b13 * alpha2 / lambda;
    let (o, l) = (T::zero(), T::one());
    Ok(Matrix3::new(alpha, gamma, u0, o, beta, v0, o, o, l))
}

/// Board pose from a homography and camera matrix, with positive depth.
pub fn pose_from_homography<T: Real>(k: &Matrix3<T>, h: &Matrix3<T>) -> Option<Pose<T>> {
    let k_inv = k.try_inverse()?;
    let a = k_inv * h;
    let n1 = a.column(0).norm();
    if !(n1 > T::zero()) {
        return None;
    }
    let mut lambda = T::one() / n1;
    if (a.column(2) * lambda).z < T::zero() {
        lambda = -lambda;
    }
    let r1: Vector3<T> = a.column(0) * lambda;
    let r2: Vector3<T> = a.column(1) * lambda;
    let r3 = r1.cross(&r2);
    let t: Vector3<T> = a.column(2) * lambda;
    let r = Matrix3::from_columns(&[r1, r2, r3]);
    Some(Pose::from_parts(project_to_so3(&r), t))
}

#[derive(Debug, Clone)]
struct CalibState<T: Real> {
    intrinsics: Intrinsics<T>,
    distortion: Distortion<T>,
    poses: Vec<Pose<T>>,
}

struct CalibProblem<'a, T: Real> {
    views: &'a [PlanarView<T>],
    residual_count: usize,
}

impl<T: Real> LeastSquares<T> for CalibProblem<'_, T> {
    type State = CalibState<T>;

    fn residuals(&self, s: &CalibState<T>) -> Option<DVector<T>> {
        let mut r = DVector::zeros(self.residual_count);
        let mut k = 0;
        for (view, pose) in self.views.iter().zip(&s.poses) {
            for (b, u) in view.board.iter().zip(&view.image) {
                let p = Point3::new(b.x, b.y, T::zero());
                let px = project(&s.intrinsics, &s.distortion, pose, &p).ok()?;
                r[k] = px.x - u.x;
                r[k + 1] = px.y - u.y;
                k += 2;
            }
        }
        Some(r)
    }

    fn jacobian(&self, s: &CalibState<T>) -> Option<DMatrix<T>> {
        let cols = 10 + 6 * self.views.len();
        let mut j = DMatrix::zeros(self.residual_count, cols);
        let mut row = 0;
        for (vi, (view, pose)) in self.views.iter().zip(&s.poses).enumerate() {
            for b in &view.board {
                let p = Point3::new(b.x, b.y, T::zero());
                let rp = pose.rotation * p.coords;
                let pc = Point3::from(rp + pose.translation);
                let pj = projection_jacobian(&s.intrinsics, &s.distortion, &pc).ok()?;
                j.view_mut((row, 0), (2, 10)).copy_from(&pj.wrt_intrinsics);
                let d_omega = pj.wrt_point * (-skew(&rp));
                let c0 = 10 + 6 * vi;
                j.view_mut((row, c0), (2, 3)).copy_from(&d_omega);
                j.view_mut((row, c0 + 3), (2, 3)).copy_from(&pj.wrt_point);
                row += 2;
            }
        }
        Some(j)
    }

    fn retract(&self, s: &CalibState<T>, d: &DVector<T>) -> CalibState<T> {
        let mut intr = s.intrinsics;
        intr.fx += d[0];
        intr.fy += d[1];
        intr.cx += d[2];
        intr.cy += d[3];
        intr.skew += d[4];
        let dist = Distortion {
            k1: s.distortion.k1 + d[5],
            k2: s.distortion.k2 + d[6],
            k3: s.distortion.k3 + d[7],
            p1: s.distortion.p1 + d[8],
            p2: s.distortion.p2 + d[9],
        };
        let poses = s
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let c = 10 + 6 * i;
                let omega = Vector3::new(d[c], d[c + 1], d[c + 2]);
                let dt = Vector3::new(d[c + 3], d[c + 4], d[c + 5]);
                p.perturbed(&omega, &dt)
            })
            .collect();
        CalibState {
            intrinsics: intr,
            distortion: dist,
            poses,
        }
    }
}

fn view_order_key<T: Real>(a: &PlanarView<T>, b: &PlanarView<T>) -> std::cmp::Ordering {
    let flat = |v: &PlanarView<T>| -> Vec<f64> {
        v.board
            .iter()
            .zip(&v.image)
            .flat_map(|(p, q)| [to_f64(p.x), to_f64(p.y), to_f64(q.x), to_f64(q.y)])
            .collect()
    };
    let (fa, fb) = (flat(a), flat(b));
    fa.len().cmp(&fb.len()).then_with(|| {
        fa.iter()
            .zip(&fb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Checks that the distortion map keeps a positive Jacobian determinant over
/// the normalised footprint of the image.
fn distortion_is_injective<T: Real>(intr: &Intrinsics<T>, dist: &Distortion<T>) -> bool {
    if dist.is_zero() {
        return true;
    }
    let steps = 16;
    let w = intr.width as f64;
    let h = intr.height as f64;
    for i in 0..=steps {
        for j in 0..=steps {
            let px = Point2::new(lit::<T>(w * i as f64 / steps as f64), lit::<T>(h * j as f64 / steps as f64));
            // Evaluate at the distorted coordinates as a first-order proxy for
            // the undistorted location.
            let n = intr.to_normalized(&px);
            if !(dist.jacobian(&n).determinant() > T::zero()) {
                return false;
            }
        }
    }
    true
}

/// Zhang calibration with default refinement options.
pub fn calibrate_zhang<T: Real>(
    views: &[PlanarView<T>],
    width: u32,
    height: u32,
) -> Result<Calibration<T>, CalibrationError<T>> {
    calibrate_zhang_with(views, width, height, &LmOptions::default())
}

/// Closed-form initialisation from per-view homographies followed by joint
/// LM refinement of intrinsics, distortion and every view pose.
///
/// Views are processed in a canonical order, so the result does not depend
/// on the order of `views`; returned poses follow the input order.
pub fn calibrate_zhang_with<T: Real>(
    views: &[PlanarView<T>],
    width: u32,
    height: u32,
    opts: &LmOptions,
) -> Result<Calibration<T>, CalibrationError<T>> {
    if views.len() < 3 {
        return Err(CalibrationError::InsufficientViews(views.len()));
    }
    for (index, v) in views.iter().enumerate() {
        v.validate()
            .map_err(|reason| CalibrationError::InvalidView { index, reason })?;
    }
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by(|&a, &b| view_order_key(&views[a], &views[b]));
    let sorted: Vec<PlanarView<T>> = order.iter().map(|&i| views[i].clone()).collect();

    // Condition pixel coordinates before the conic fit; K = N⁻¹ K'.
    let s = lit::<T>(2.0 / (width as f64 + height as f64).max(1.0));
    let (o, l) = (T::zero(), T::one());
    let half_w = lit::<T>(width as f64 * 0.5);
    let half_h = lit::<T>(height as f64 * 0.5);
    let cond = Matrix3::new(s, o, -s * half_w, o, s, -s * half_h, o, o, l);
    let cond_inv = cond.try_inverse().expect("conditioning matrix is invertible");

    let homographies = sorted
        .iter()
        .map(|v| homography_dlt(&v.board, &v.image))
        .collect::<Result<Vec<_>, _>>()?;
    let conditioned: Vec<Matrix3<T>> = homographies.iter().map(|h| cond * h).collect();
    let k_cond = closed_form_intrinsics(&conditioned)?;
    let k = cond_inv * k_cond;
    let k = k / k[(2, 2)];

    let mut intrinsics = Intrinsics {
        fx: k[(0, 0)],
        fy: k[(1, 1)],
        cx: k[(0, 2)],
        cy: k[(1, 2)],
        skew: T::zero(),
        width,
        height,
    };
    if !(intrinsics.fx > T::zero() && intrinsics.fy > T::zero()) {
        return Err(CalibrationError::DegenerateConfiguration(
            "closed-form focal lengths are not positive".into(),
        ));
    }
    let k0 = intrinsics.matrix();
    let poses = homographies
        .iter()
        .map(|h| pose_from_homography(&k0, h))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| CalibrationError::DegenerateConfiguration("pose recovery failed".into()))?;

    let residual_count = 2 * sorted.iter().map(|v| v.len()).sum::<usize>();
    let problem = CalibProblem {
        views: &sorted,
        residual_count,
    };
    let start = CalibState {
        intrinsics,
        distortion: Distortion::zero(),
        poses,
    };
    let (best, report) = lm::minimize(&problem, start, opts);
    intrinsics = best.intrinsics;

    let mut poses_in_input_order = vec![Pose::identity(); views.len()];
    for (sorted_idx, &orig) in order.iter().enumerate() {
        poses_in_input_order[orig] = best.poses[sorted_idx];
    }
    let calib = Calibration {
        intrinsics,
        distortion: best.distortion,
        poses: poses_in_input_order,
        rms_px: report.final_rms(),
        initial_rms_px: report.initial_rms(),
        iterations: report.iterations,
    };
    match report.status {
        LmStatus::Converged => {}
        LmStatus::MaxIterations | LmStatus::Failed => {
            return Err(CalibrationError::NoConvergence(Box::new(calib)))
        }
    }
    if intrinsics.validate().is_err() || !calib.distortion.is_finite() {
        return Err(CalibrationError::NoConvergence(Box::new(calib)));
    }
    if !distortion_is_injective(&intrinsics, &calib.distortion) {
        return Err(CalibrationError::DegenerateConfiguration(
            "refined distortion folds over inside the image".into(),
        ));
    }
    Ok(calib)
}
