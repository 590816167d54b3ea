//! Planar Perspective-n-Point for a four-corner face.
//!
//! The closed-form stage undistorts the corners, fits the plane-to-image
//! homography in normalised coordinates and decomposes it. Planar targets
//! seen from far away have a second, mirrored pose that explains the corners
//! almost as well; it is generated with the infinitesimal-plane construction
//! and both candidates are refined with Levenberg–Marquardt.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::camera::{
    collinear, homography_dlt, pose_from_homography, projection_jacobian, unproject, CameraError,
    Distortion, Intrinsics,
};
use crate::geom::{project_to_so3, skew, PalletFaceModel, Point2, Point3, Pose};
use crate::lm::{self, LeastSquares, LmOptions, LmStatus};
use crate::scalar::{lit, to_f64, Real};

/// Candidates whose rms differ by less than this fraction are ambiguous.
pub const AMBIGUITY_RATIO: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate<T: Real> {
    pub pose: Pose<T>,
    pub rms_reproj_px: T,
    /// Number of distinct refined candidates (1 or 2).
    pub candidate_count: usize,
    pub ambiguous: bool,
    /// Rms of the runner-up candidate when there are two.
    pub alternative_rms_px: Option<T>,
    pub initial_rms_px: T,
    pub iterations: usize,
}

#[derive(Debug, Error)]
pub enum PnpError<T: Real> {
    #[error("degenerate-configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no-valid-pose: every candidate lies behind the camera")]
    NoValidPose,
    #[error("bad-keypoint-order: corners must be ordered TL, TR, BR, BL")]
    BadKeypointOrder,
    #[error("no-convergence: pose refinement stopped at rms {:.6} px", to_f64(.0.rms_reproj_px))]
    NoConvergence(Box<PoseEstimate<T>>),
    #[error(transparent)]
    Camera(CameraError),
}

impl<T: Real> From<CameraError> for PnpError<T> {
    fn from(e: CameraError) -> Self {
        match e {
            CameraError::DegenerateConfiguration(m) => PnpError::DegenerateConfiguration(m),
            other => PnpError::Camera(other),
        }
    }
}

fn turn<T: Real>(a: &Point2<T>, b: &Point2<T>, c: &Point2<T>) -> T {
    let ab = b - a;
    let bc = c - b;
    ab.x * bc.y - ab.y * bc.x
}

fn turn_signs<T: Real>(pts: &[Point2<T>; 4]) -> [bool; 4] {
    std::array::from_fn(|i| turn(&pts[i], &pts[(i + 1) % 4], &pts[(i + 2) % 4]) > T::zero())
}

/// Shoelace area with image axes (positive for TL, TR, BR, BL with y down).
pub fn signed_area<T: Real>(pts: &[Point2<T>]) -> T {
    let n = pts.len();
    let mut acc = T::zero();
    for i in 0..n {
        let (a, b) = (&pts[i], &pts[(i + 1) % n]);
        acc += a.x * b.y - b.x * a.y;
    }
    acc * lit(0.5)
}

fn check_object<T: Real>(object: &[Point3<T>; 4]) -> Result<[Point2<T>; 4], PnpError<T>> {
    if object.iter().any(|p| p.z.abs() > lit(1e-12)) {
        return Err(PnpError::DegenerateConfiguration(
            "object points must lie in z = 0".into(),
        ));
    }
    let xy: [Point2<T>; 4] = std::array::from_fn(|i| Point2::new(object[i].x, object[i].y));
    for i in 0..4 {
        for j in i + 1..4 {
            for k in j + 1..4 {
                if collinear(&xy[i], &xy[j], &xy[k], lit(1e-9)) {
                    return Err(PnpError::DegenerateConfiguration(
                        "object corners are collinear".into(),
                    ));
                }
            }
        }
    }
    Ok(xy)
}

fn check_image<T: Real>(image: &[Point2<T>; 4]) -> Result<(), PnpError<T>> {
    if image.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(PnpError::DegenerateConfiguration("non-finite image point".into()));
    }
    for i in 0..4 {
        for j in i + 1..4 {
            for k in j + 1..4 {
                if collinear(&image[i], &image[j], &image[k], lit(1e-9)) {
                    return Err(PnpError::DegenerateConfiguration(
                        "image points are collinear or repeated".into(),
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Least-squares translation for a fixed rotation given normalised rays.
fn translation_for_rotation<T: Real>(
    rotation: &Matrix3<T>,
    object: &[Point2<T>; 4],
    rays: &[Vector2<T>; 4],
) -> Option<Vector3<T>> {
    let mut ata = Matrix3::<T>::zeros();
    let mut atb = Vector3::<T>::zeros();
    for (p, u) in object.iter().zip(rays) {
        let rp = rotation * Vector3::new(p.x, p.y, T::zero());
        let rows = [
            Vector3::new(T::one(), T::zero(), -u.x),
            Vector3::new(T::zero(), T::one(), -u.y),
        ];
        for a in rows {
            ata += a * a.transpose();
            atb -= a * a.dot(&rp);
        }
    }
    ata.try_inverse().map(|inv| inv * atb)
}

/// The two rotations of the infinitesimal-plane decomposition for a
/// homography `h` from a plane centred at the origin to normalised image
/// coordinates.
fn ippe_rotations<T: Real>(h: &Matrix3<T>) -> Option<[Matrix3<T>; 2]> {
    if h[(2, 2)].abs() < lit(1e-15) {
        return None;
    }
    let h = h / h[(2, 2)];
    let v = Vector2::new(h[(0, 2)], h[(1, 2)]);
    let jac = Matrix2::new(
        h[(0, 0)] - h[(2, 0)] * h[(0, 2)],
        h[(0, 1)] - h[(2, 1)] * h[(0, 2)],
        h[(1, 0)] - h[(2, 0)] * h[(1, 2)],
        h[(1, 1)] - h[(2, 1)] * h[(1, 2)],
    );
    let t = v.norm();
    let rv = if t < lit(1e-15) {
        Matrix3::identity()
    } else {
        let s = Vector3::new(v.x, v.y, T::one()).norm();
        let cos_th = T::one() / s;
        let sin_th = (T::one() - T::one() / (s * s)).max(T::zero()).sqrt();
        let o = T::zero();
        let k = Matrix3::new(o, o, v.x, o, o, v.y, -v.x, -v.y, o) / t;
        Matrix3::identity() + k * sin_th + k * k * (T::one() - cos_th)
    };
    let b = Matrix2::new(
        rv[(0, 0)] - v.x * rv[(2, 0)],
        rv[(0, 1)] - v.x * rv[(2, 1)],
        rv[(1, 0)] - v.y * rv[(2, 0)],
        rv[(1, 1)] - v.y * rv[(2, 1)],
    );
    let a = b.try_inverse()? * jac;
    let aat = a * a.transpose();
    let gamma = (lit::<T>(0.5)
        * (aat[(0, 0)]
            + aat[(1, 1)]
            + ((aat[(0, 0)] - aat[(1, 1)]).powi(2) + lit::<T>(4.0) * aat[(0, 1)].powi(2)).sqrt()))
    .sqrt();
    if !(gamma > T::zero()) {
        return None;
    }
    let r22 = a / gamma;
    let hm = Matrix2::identity() - r22.transpose() * r22;
    let b1 = hm[(0, 0)].max(T::zero()).sqrt();
    let mut b2 = hm[(1, 1)].max(T::zero()).sqrt();
    if hm[(0, 1)] < T::zero() {
        b2 = -b2;
    }
    let c1 = Vector3::new(r22[(0, 0)], r22[(1, 0)], b1);
    let c2 = Vector3::new(r22[(0, 1)], r22[(1, 1)], b2);
    let d = c1.cross(&c2);
    let build = |sign: T| {
        let m = Matrix3::new(
            r22[(0, 0)],
            r22[(0, 1)],
            sign * d.x,
            r22[(1, 0)],
            r22[(1, 1)],
            sign * d.y,
            sign * b1,
            sign * b2,
            d.z,
        );
        project_to_so3(&(rv * m))
    };
    Some([build(T::one()), build(-T::one())])
}

fn in_front<T: Real>(pose: &Pose<T>, object: &[Point3<T>; 4]) -> bool {
    pose.translation.z > T::zero()
        && object
            .iter()
            .all(|p| pose.transform_point(p).z > lit(crate::camera::MIN_DEPTH))
}

/// Closed-form planar PnP: the homography decomposition plus its mirrored
/// ambiguity partner, keeping only candidates in front of the camera.
pub fn solve_planar_pnp<T: Real>(
    intr: &Intrinsics<T>,
    dist: &Distortion<T>,
    object: &[Point3<T>; 4],
    image: &[Point2<T>; 4],
) -> Result<Vec<Pose<T>>, PnpError<T>> {
    let object_xy = check_object(object)?;
    check_image(image)?;

    let mut rays = [Vector2::zeros(); 4];
    for (r, px) in rays.iter_mut().zip(image) {
        let ray = unproject(intr, dist, px)?;
        *r = Vector2::new(ray.x, ray.y);
    }
    let ray_pts: [Point2<T>; 4] = std::array::from_fn(|i| Point2::from(rays[i]));
    if turn_signs(&ray_pts) != turn_signs(&object_xy) {
        return Err(PnpError::BadKeypointOrder);
    }

    let centroid = object_xy
        .iter()
        .fold(Vector2::zeros(), |acc: Vector2<T>, p| acc + p.coords)
        / lit::<T>(4.0);
    let centred: [Point2<T>; 4] = std::array::from_fn(|i| Point2::from(object_xy[i].coords - centroid));
    let h = homography_dlt(&centred, &ray_pts)?;

    let mut candidates: Vec<Pose<T>> = Vec::with_capacity(2);
    let primary = pose_from_homography(&Matrix3::identity(), &h);
    if let Some(p) = primary {
        candidates.push(p);
    }
    if let Some(rotations) = ippe_rotations(&h) {
        // The mirror partner is the decomposition rotation farther from the
        // homography estimate.
        let mirror = match primary {
            Some(p) => {
                let d0 = crate::geom::rotation_angle(&(rotations[0] * p.rotation.transpose()));
                let d1 = crate::geom::rotation_angle(&(rotations[1] * p.rotation.transpose()));
                if d0 > d1 {
                    rotations[0]
                } else {
                    rotations[1]
                }
            }
            None => rotations[0],
        };
        if let Some(t) = translation_for_rotation(&mirror, &centred, &rays) {
            candidates.push(Pose::from_parts(mirror, t));
        }
    }

    // Back from the centred frame: R (X - c) + t.
    let c3 = Vector3::new(centroid.x, centroid.y, T::zero());
    let valid: Vec<Pose<T>> = candidates
        .into_iter()
        .map(|p| Pose::from_parts(p.rotation, p.translation - p.rotation * c3))
        .filter(|p| p.rotation.iter().all(|v| v.is_finite()) && in_front(p, object))
        .collect();
    if valid.is_empty() {
        return Err(PnpError::NoValidPose);
    }
    Ok(valid)
}

/// Stacked residuals `project(pose, X_i) - u_i`.
pub fn reprojection_residuals<T: Real>(
    pose: &Pose<T>,
    intr: &Intrinsics<T>,
    dist: &Distortion<T>,
    object: &[Point3<T>],
    image: &[Point2<T>],
) -> Result<DVector<T>, CameraError> {
    let mut r = DVector::zeros(2 * object.len());
    for (i, (p, u)) in object.iter().zip(image).enumerate() {
        let px = crate::camera::project(intr, dist, pose, p)?;
        r[2 * i] = px.x - u.x;
        r[2 * i + 1] = px.y - u.y;
    }
    Ok(r)
}

/// Jacobian of [`reprojection_residuals`] with respect to the increment
/// `(omega, dt)` of `pose.perturbed(omega, dt)`.
pub fn reprojection_jacobian<T: Real>(
    pose: &Pose<T>,
    intr: &Intrinsics<T>,
    dist: &Distortion<T>,
    object: &[Point3<T>],
) -> Result<DMatrix<T>, CameraError> {
    let mut j = DMatrix::zeros(2 * object.len(), 6);
    for (i, p) in object.iter().enumerate() {
        let rp = pose.rotation * p.coords;
        let pc = Point3::from(rp + pose.translation);
        let pj = projection_jacobian(intr, dist, &pc)?;
        j.view_mut((2 * i, 0), (2, 3))
            .copy_from(&(pj.wrt_point * (-skew(&rp))));
        j.view_mut((2 * i, 3), (2, 3)).copy_from(&pj.wrt_point);
    }
    Ok(j)
}

/// Half the summed squared reprojection error.
pub fn reprojection_cost<T: Real>(
    pose: &Pose<T>,
    intr: &Intrinsics<T>,
    dist: &Distortion<T>,
    object: &[Point3<T>],
    image: &[Point2<T>],
) -> Result<T, CameraError> {
    Ok(reprojection_residuals(pose, intr, dist, object, image)?.norm_squared() * lit(0.5))
}

struct PoseProblem<'a, T: Real> {
    intr: &'a Intrinsics<T>,
    dist: &'a Distortion<T>,
    object: &'a [Point3<T>],
    image: &'a [Point2<T>],
}

impl<T: Real> LeastSquares<T> for PoseProblem<'_, T> {
    type State = Pose<T>;

    fn residuals(&self, s: &Pose<T>) -> Option<DVector<T>> {
        reprojection_residuals(s, self.intr, self.dist, self.object, self.image).ok()
    }

    fn jacobian(&self, s: &Pose<T>) -> Option<DMatrix<T>> {
        reprojection_jacobian(s, self.intr, self.dist, self.object).ok()
    }

    fn retract(&self, s: &Pose<T>, d: &DVector<T>) -> Pose<T> {
        s.perturbed(&Vector3::new(d[0], d[1], d[2]), &Vector3::new(d[3], d[4], d[5]))
    }
}

/// LM refinement of a single pose over the 6-dof left-perturbation chart.
pub fn refine_pose<T: Real>(
    initial: &Pose<T>,
    intr: &Intrinsics<T>,
    dist: &Distortion<T>,
    object: &[Point3<T>],
    image: &[Point2<T>],
) -> Result<PoseEstimate<T>, PnpError<T>> {
    if !(initial.translation.z > T::zero()) {
        return Err(PnpError::NoValidPose);
    }
    let problem = PoseProblem {
        intr,
        dist,
        object,
        image,
    };
    let (pose, report) = lm::minimize(&problem, *initial, &LmOptions::default());
    if report.status == LmStatus::Failed && report.iterations == 0 {
        return Err(PnpError::NoValidPose);
    }
    let estimate = PoseEstimate {
        pose,
        rms_reproj_px: report.final_rms(),
        candidate_count: 1,
        ambiguous: false,
        alternative_rms_px: None,
        initial_rms_px: report.initial_rms(),
        iterations: report.iterations,
    };
    match report.status {
        LmStatus::Converged => Ok(estimate),
        _ => Err(PnpError::NoConvergence(Box::new(estimate))),
    }
}

fn same_pose<T: Real>(a: &Pose<T>, b: &Pose<T>) -> bool {
    let scale = a.translation.norm().max(T::one());
    a.rotation_angle_to(b) < lit(1e-6) && a.translation_distance_to(b) < scale * lit(1e-6)
}

/// Solves, refines every candidate and returns the lowest-rms pose.
pub fn estimate_planar_pose<T: Real>(
    intr: &Intrinsics<T>,
    dist: &Distortion<T>,
    object: &[Point3<T>; 4],
    image: &[Point2<T>; 4],
) -> Result<PoseEstimate<T>, PnpError<T>> {
    let candidates = solve_planar_pnp(intr, dist, object, image)?;
    let mut refined: Vec<PoseEstimate<T>> = Vec::with_capacity(2);
    let mut failure = None;
    for c in &candidates {
        match refine_pose(c, intr, dist, object, image) {
            Ok(e) => refined.push(e),
            Err(e) => failure = Some(e),
        }
    }
    if refined.is_empty() {
        return Err(failure.unwrap_or(PnpError::NoValidPose));
    }
    refined.sort_by(|a, b| {
        a.rms_reproj_px
            .partial_cmp(&b.rms_reproj_px)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut best = refined[0].clone();
    let runner_up = refined
        .iter()
        .skip(1)
        .find(|e| !same_pose(&e.pose, &best.pose));
    if let Some(alt) = runner_up {
        let (r1, r2) = (best.rms_reproj_px, alt.rms_reproj_px);
        best.candidate_count = 2;
        best.alternative_rms_px = Some(r2);
        best.ambiguous = (r2 - r1).abs() < lit::<T>(AMBIGUITY_RATIO) * r1.max(r2);
    }
    Ok(best)
}

/// Pallet pose from four detected face corners ordered TL, TR, BR, BL.
pub fn localize_pallet<T: Real>(
    intr: &Intrinsics<T>,
    dist: &Distortion<T>,
    model: &PalletFaceModel<T>,
    keypoints: &[Point2<T>; 4],
) -> Result<PoseEstimate<T>, PnpError<T>> {
    estimate_planar_pose(intr, dist, &model.canonical_corners(), keypoints)
}
