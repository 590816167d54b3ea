//! Pallet-face localisation toolkit.
//!
//! * [`geom`]: rigid poses, Euler angles and the pallet face rectangles.
//! * [`camera`]: pinhole + Brown–Conrady projection, DLT homography, Zhang
//!   calibration.
//! * [`pnp`]: four-corner planar PnP with ambiguity handling and refinement.
//! * [`synthgen`]: seeded synthetic keypoint datasets.
//! * [`detect_io`]: YOLO-pose label I/O, detectors and matching.
//! * [`eval`]: AP / mAP, keypoint mean error, pose errors and sweeps.
//! * [`formats`]: JSON files read and written by the CLI.
//!
//! The geometric modules are generic over [`Real`] (`f32` or `f64`); the
//! `*64` / `*32` aliases below fix the scalar. Dataset, detection and
//! metric code works in `f64`.

pub mod camera;
pub mod detect_io;
pub mod eval;
pub mod formats;
pub mod geom;
pub mod lm;
pub mod pnp;
pub mod scalar;
pub mod synthgen;

pub use camera::{CalibrationError, CameraError, Distortion, Intrinsics, PlanarView};
pub use geom::{EulerAngles, FaceKind, PalletFaceModel, Point2, Point3, Pose};
pub use pnp::{PnpError, PoseEstimate};
pub use scalar::Real;

pub type RigidPose = Pose<f64>;
pub type Pose32 = Pose<f32>;
pub type Intrinsics64 = Intrinsics<f64>;
pub type Intrinsics32 = Intrinsics<f32>;
pub type Distortion64 = Distortion<f64>;
pub type Distortion32 = Distortion<f32>;
pub type PoseEstimate64 = PoseEstimate<f64>;
pub type PalletFace64 = PalletFaceModel<f64>;
pub type Point2d = Point2<f64>;
pub type Point3d = Point3<f64>;
