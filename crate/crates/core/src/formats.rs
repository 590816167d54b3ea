//! JSON file formats exchanged with the CLI and external tools.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Distortion, Intrinsics, PlanarView};
use crate::geom::{Point2, PoseRecord, EULER_CONVENTION};
use crate::pnp::PoseEstimate;
use crate::scalar::{lit, to_f64, Real};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| FormatError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    fs::write(path, text).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionFile {
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
}

/// `{"fx","fy","cx","cy","skew","width","height","dist":{k1,k2,k3,p1,p2}}`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub dist: DistortionFile,
}

impl IntrinsicsFile {
    pub fn from_model<T: Real>(intr: &Intrinsics<T>, dist: &Distortion<T>) -> Self {
        IntrinsicsFile {
            fx: to_f64(intr.fx),
            fy: to_f64(intr.fy),
            cx: to_f64(intr.cx),
            cy: to_f64(intr.cy),
            skew: to_f64(intr.skew),
            width: intr.width,
            height: intr.height,
            dist: DistortionFile {
                k1: to_f64(dist.k1),
                k2: to_f64(dist.k2),
                k3: to_f64(dist.k3),
                p1: to_f64(dist.p1),
                p2: to_f64(dist.p2),
            },
        }
    }

    pub fn intrinsics<T: Real>(&self) -> Intrinsics<T> {
        Intrinsics {
            fx: lit(self.fx),
            fy: lit(self.fy),
            cx: lit(self.cx),
            cy: lit(self.cy),
            skew: lit(self.skew),
            width: self.width,
            height: self.height,
        }
    }

    pub fn distortion<T: Real>(&self) -> Distortion<T> {
        Distortion {
            k1: lit(self.dist.k1),
            k2: lit(self.dist.k2),
            k3: lit(self.dist.k3),
            p1: lit(self.dist.p1),
            p2: lit(self.dist.p2),
        }
    }

    /// Checks the intrinsics invariants and returns the typed pair.
    pub fn to_model<T: Real>(&self) -> Result<(Intrinsics<T>, Distortion<T>), String> {
        let intr = self.intrinsics::<T>();
        intr.validate().map_err(|e| e.to_string())?;
        let dist = self.distortion::<T>();
        if !dist.is_finite() {
            return Err("non-finite distortion coefficient".into());
        }
        Ok((intr, dist))
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let f: IntrinsicsFile = read_json(path)?;
        f.to_model::<f64>().map_err(|reason| FormatError::Invalid {
            path: path.display().to_string(),
            reason,
        })?;
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardCorrespondence {
    pub board_xy_m: [f64; 2],
    pub pixel: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewFile {
    pub points: Vec<BoardCorrespondence>,
}

/// `{"views":[{"points":[{"board_xy_m":[x,y],"pixel":[u,v]},...]},...]}`
///
/// `width`/`height` are optional extras giving the image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationViewsFile {
    pub views: Vec<ViewFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

impl CalibrationViewsFile {
    pub fn from_views<T: Real>(views: &[PlanarView<T>]) -> Self {
        CalibrationViewsFile {
            views: views
                .iter()
                .map(|v| ViewFile {
                    points: v
                        .board
                        .iter()
                        .zip(&v.image)
                        .map(|(b, p)| BoardCorrespondence {
                            board_xy_m: [to_f64(b.x), to_f64(b.y)],
                            pixel: [to_f64(p.x), to_f64(p.y)],
                        })
                        .collect(),
                })
                .collect(),
            width: None,
            height: None,
        }
    }

    pub fn planar_views<T: Real>(&self) -> Vec<PlanarView<T>> {
        self.views
            .iter()
            .map(|v| {
                let board = v
                    .points
                    .iter()
                    .map(|c| Point2::new(lit(c.board_xy_m[0]), lit(c.board_xy_m[1])))
                    .collect();
                let image = v
                    .points
                    .iter()
                    .map(|c| Point2::new(lit(c.pixel[0]), lit(c.pixel[1])))
                    .collect();
                PlanarView::new(board, image)
            })
            .collect()
    }

    /// Smallest image size containing every observed pixel.
    pub fn observed_extent(&self) -> (u32, u32) {
        let (mut w, mut h) = (0.0f64, 0.0f64);
        for p in self.views.iter().flat_map(|v| &v.points) {
            w = w.max(p.pixel[0]);
            h = h.max(p.pixel[1]);
        }
        (w.ceil().max(1.0) as u32, h.ceil().max(1.0) as u32)
    }
}

/// Keypoint input for single-frame localisation: four pixels, TL, TR, BR, BL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointsFile {
    pub keypoints_px: [[f64; 2]; 4],
}

impl KeypointsFile {
    pub fn points(&self) -> [Point2<f64>; 4] {
        std::array::from_fn(|i| Point2::new(self.keypoints_px[i][0], self.keypoints_px[i][1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EulerRecord {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub gimbal_lock: bool,
}

/// Serialized [`PoseEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimateRecord {
    pub pose: PoseRecord,
    pub euler_deg: EulerRecord,
    pub euler_convention: String,
    pub rms_reproj_px: f64,
    pub candidate_count: usize,
    pub ambiguous: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternative_rms_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face: Option<String>,
}

impl PoseEstimateRecord {
    pub fn new<T: Real>(est: &PoseEstimate<T>) -> Self {
        let e = est.pose.euler();
        PoseEstimateRecord {
            pose: PoseRecord::from(&est.pose),
            euler_deg: EulerRecord {
                rx: to_f64(e.rx),
                ry: to_f64(e.ry),
                rz: to_f64(e.rz),
                gimbal_lock: e.gimbal_lock,
            },
            euler_convention: EULER_CONVENTION.to_string(),
            rms_reproj_px: to_f64(est.rms_reproj_px),
            candidate_count: est.candidate_count,
            ambiguous: est.ambiguous,
            alternative_rms_px: est.alternative_rms_px.map(to_f64),
            face: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intrinsics_file_shape() {
        let text = r#"{"fx":600,"fy":601,"cx":320,"cy":192,"skew":0,"width":640,"height":384,
            "dist":{"k1":-0.1,"k2":0.0,"k3":0.0,"p1":0.0,"p2":0.0}}"#;
        let f: IntrinsicsFile = serde_json::from_str(text).unwrap();
        let (k, d) = f.to_model::<f64>().unwrap();
        assert_eq!(k.fy, 601.0);
        assert_eq!(d.k1, -0.1);
        let back = serde_json::to_value(f).unwrap();
        assert_eq!(back["dist"]["k1"], -0.1);

        let bad = IntrinsicsFile { fx: -1.0, ..f };
        assert!(bad.to_model::<f64>().is_err());
        let off = IntrinsicsFile { cx: 700.0, ..f };
        assert!(off.to_model::<f64>().is_err());
    }

    #[test]
    fn views_file_shape() {
        let text = r#"{"views":[{"points":[{"board_xy_m":[0.0,0.1],"pixel":[10.5,20.25]}]}]}"#;
        let f: CalibrationViewsFile = serde_json::from_str(text).unwrap();
        let v = f.planar_views::<f64>();
        assert_eq!(v[0].board[0], Point2::new(0.0, 0.1));
        assert_eq!(v[0].image[0], Point2::new(10.5, 20.25));
        assert_eq!(f.observed_extent(), (11, 21));
    }
}
