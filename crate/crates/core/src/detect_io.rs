//! Keypoint detection interchange: YOLO-pose lines, detectors and
//! prediction-to-truth matching.
//!
//! Line layout (all coordinates normalised by image size):
//!
//! ```text
//! <class> <cx> <cy> <w> <h> [<conf>] <x1> <y1> <v1> ... <x4> <y4> <v4>
//! ```
//!
//! Visibility is 2 = visible, 1 = occluded / dropped out, 0 = absent.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geom::Point2;
use crate::synthgen::{bbox_from_keypoints, sample_frame, RandomizationConfig};

pub const KEYPOINTS: usize = 4;
pub const LABEL_FIELDS: usize = 5 + 3 * KEYPOINTS;
pub const PREDICTION_FIELDS: usize = 6 + 3 * KEYPOINTS;
/// Slack applied when comparing an IoU against a threshold.
pub const IOU_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DetectIoError {
    #[error("malformed-line: line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("out-of-range: line {line}: {field} = {value}")]
    OutOfRange {
        line: usize,
        field: String,
        value: f64,
    },
    #[error("missing-frame: {0}")]
    MissingFrame(u64),
    #[error("detector failure on frame {frame}: {reason}")]
    Detector { frame: u64, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Normalised centre-size box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `(x1, y1, x2, y2)` corner form.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn iou(&self, other: &NormBox) -> f64 {
        // Areas come from the same corner form as the intersection, so
        // identical boxes give exactly 1.
        let (a0, a1, a2, a3) = self.corners();
        let (b0, b1, b2, b3) = other.corners();
        let ix = a2.min(b2) - a0.max(b0);
        let iy = a3.min(b3) - a1.max(b1);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = (a2 - a0) * (a3 - a1) + (b2 - b0) * (b3 - b1) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visibility: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointDetection {
    pub class_id: u32,
    pub confidence: f64,
    pub bbox: NormBox,
    /// TL, TR, BR, BL.
    pub keypoints: [Keypoint; KEYPOINTS],
}

impl KeypointDetection {
    pub fn keypoints_px(&self, image_w: u32, image_h: u32) -> [Point2<f64>; KEYPOINTS] {
        let (w, h) = (image_w as f64, image_h as f64);
        self.keypoints.map(|k| Point2::new(k.x * w, k.y * h))
    }

    pub fn validate(&self) -> Result<(), (String, f64)> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err((name.to_string(), v))
            }
        };
        unit("cx", self.bbox.cx)?;
        unit("cy", self.bbox.cy)?;
        unit("w", self.bbox.w)?;
        unit("h", self.bbox.h)?;
        unit("confidence", self.confidence)?;
        for (i, k) in self.keypoints.iter().enumerate() {
            unit(&format!("x{}", i + 1), k.x)?;
            unit(&format!("y{}", i + 1), k.y)?;
            if k.visibility > 2 {
                return Err((format!("v{}", i + 1), k.visibility as f64));
            }
        }
        Ok(())
    }
}

/// Formats a detection with 6-decimal fixed precision.
pub fn write_yolo_pose_line(det: &KeypointDetection, with_confidence: bool) -> String {
    let mut s = String::with_capacity(160);
    let b = &det.bbox;
    write!(s, "{} {:.6} {:.6} {:.6} {:.6}", det.class_id, b.cx, b.cy, b.w, b.h).unwrap();
    if with_confidence {
        write!(s, " {:.6}", det.confidence).unwrap();
    }
    for k in &det.keypoints {
        write!(s, " {:.6} {:.6} {}", k.x, k.y, k.visibility).unwrap();
    }
    s
}

/// Parses one line; `line_no` is only used in error messages.
pub fn parse_yolo_pose_line(
    line: &str,
    has_confidence: bool,
    line_no: usize,
) -> Result<KeypointDetection, DetectIoError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let expected = if has_confidence {
        PREDICTION_FIELDS
    } else {
        LABEL_FIELDS
    };
    if fields.len() != expected {
        return Err(DetectIoError::MalformedLine {
            line: line_no,
            reason: format!("expected {expected} fields, found {}", fields.len()),
        });
    }
    let num = |i: usize| -> Result<f64, DetectIoError> {
        let v: f64 = fields[i].parse().map_err(|_| DetectIoError::MalformedLine {
            line: line_no,
            reason: format!("field {} (`{}`) is not a number", i + 1, fields[i]),
        })?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DetectIoError::MalformedLine {
                line: line_no,
                reason: format!("field {} is not finite", i + 1),
            })
        }
    };
    let class_id: u32 = fields[0].parse().map_err(|_| DetectIoError::MalformedLine {
        line: line_no,
        reason: format!("class id `{}` is not a non-negative integer", fields[0]),
    })?;
    let bbox = NormBox {
        cx: num(1)?,
        cy: num(2)?,
        w: num(3)?,
        h: num(4)?,
    };
    let (confidence, kp0) = if has_confidence { (num(5)?, 6) } else { (1.0, 5) };
    let mut keypoints = [Keypoint {
        x: 0.0,
        y: 0.0,
        visibility: 0,
    }; KEYPOINTS];
    for (k, kp) in keypoints.iter_mut().enumerate() {
        let base = kp0 + 3 * k;
        let v = num(base + 2)?;
        if v.fract() != 0.0 || !(0.0..=2.0).contains(&v) {
            return Err(DetectIoError::OutOfRange {
                line: line_no,
                field: format!("v{}", k + 1),
                value: v,
            });
        }
        *kp = Keypoint {
            x: num(base)?,
            y: num(base + 1)?,
            visibility: v as u8,
        };
    }
    let det = KeypointDetection {
        class_id,
        confidence,
        bbox,
        keypoints,
    };
    det.validate()
        .map_err(|(field, value)| DetectIoError::OutOfRange {
            line: line_no,
            field,
            value,
        })?;
    Ok(det)
}

/// Parses every non-blank line of a label or prediction file.
pub fn parse_yolo_pose_text(
    text: &str,
    has_confidence: bool,
) -> Result<Vec<KeypointDetection>, DetectIoError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_yolo_pose_line(l, has_confidence, i + 1))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame: u64,
    pub detections: Vec<KeypointDetection>,
}

/// Source of keypoint detections. Implementations must tolerate concurrent
/// calls for distinct frames.
pub trait Detector: Sync {
    fn detect(&self, frame: u64) -> Result<FrameDetections, DetectIoError>;
}

/// Detector that reports the synthetic frame's noisy corners.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    config: RandomizationConfig,
}

impl OracleDetector {
    pub fn new(config: RandomizationConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &RandomizationConfig {
        &self.config
    }
}

impl Detector for OracleDetector {
    fn detect(&self, frame: u64) -> Result<FrameDetections, DetectIoError> {
        if frame >= self.config.count {
            return Err(DetectIoError::MissingFrame(frame));
        }
        let f = sample_frame(&self.config, frame).map_err(|e| DetectIoError::Detector {
            frame,
            reason: e.to_string(),
        })?;
        let (w, h) = (self.config.image_width, self.config.image_height);
        let (iw, ih) = (w as f64, h as f64);
        let bbox = bbox_from_keypoints(&f.noisy_corners_px, w, h).normalized(w, h);
        let det = KeypointDetection {
            class_id: f.face.class_id(),
            confidence: 1.0,
            bbox,
            keypoints: std::array::from_fn(|i| Keypoint {
                x: (f.noisy_corners_px[i].x / iw).clamp(0.0, 1.0),
                y: (f.noisy_corners_px[i].y / ih).clamp(0.0, 1.0),
                visibility: if f.visible[i] { 2 } else { 1 },
            }),
        };
        Ok(FrameDetections {
            frame,
            detections: vec![det],
        })
    }
}

/// Reads `predictions/{frame}.txt` files written by an external detector.
#[derive(Debug, Clone)]
pub struct FilePredictionAdapter {
    files: BTreeMap<u64, PathBuf>,
}

impl FilePredictionAdapter {
    /// Indexes every `*.txt` file whose stem parses as a frame number.
    pub fn new(dir: &Path) -> Result<Self, DetectIoError> {
        let mut files = BTreeMap::new();
        let entries = fs::read_dir(dir).map_err(|source| DetectIoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for entry in entries {
            let entry = entry.map_err(|source| DetectIoError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            if let Some(id) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<u64>().ok())
            {
                files.insert(id, path);
            }
        }
        Ok(Self { files })
    }

    pub fn frames(&self) -> impl Iterator<Item = u64> + '_ {
        self.files.keys().copied()
    }

    pub fn contains(&self, frame: u64) -> bool {
        self.files.contains_key(&frame)
    }
}

impl Detector for FilePredictionAdapter {
    fn detect(&self, frame: u64) -> Result<FrameDetections, DetectIoError> {
        let path = self
            .files
            .get(&frame)
            .ok_or(DetectIoError::MissingFrame(frame))?;
        let text = fs::read_to_string(path).map_err(|source| DetectIoError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(FrameDetections {
            frame,
            detections: parse_yolo_pose_text(&text, true)?,
        })
    }
}

/// Reorders a quad whose winding is inverted back to TL, TR, BR, BL.
///
/// Quads that are already clockwise on screen (y down) are returned as is.
pub fn canonicalize_winding(det: &KeypointDetection) -> KeypointDetection {
    let k = &det.keypoints;
    let area: f64 = (0..KEYPOINTS)
        .map(|i| {
            let (a, b) = (&k[i], &k[(i + 1) % KEYPOINTS]);
            a.x * b.y - b.x * a.y
        })
        .sum();
    if area >= 0.0 {
        return det.clone();
    }
    let reversed = [k[0], k[3], k[2], k[1]];
    // Start from the corner nearest the image's top-left.
    let start = (0..KEYPOINTS)
        .min_by(|&a, &b| {
            (reversed[a].x + reversed[a].y)
                .partial_cmp(&(reversed[b].x + reversed[b].y))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .unwrap_or(0);
    let mut out = det.clone();
    out.keypoints = std::array::from_fn(|i| reversed[(start + i) % KEYPOINTS]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub pred: usize,
    pub truth: Option<usize>,
    /// IoU with the matched truth (0 when unmatched).
    pub iou: f64,
}

/// Greedy matching in descending confidence: every prediction takes the
/// highest-IoU unmatched truth of its class with IoU ≥ `iou_threshold`.
///
/// Ties in confidence are broken by the prediction's best IoU, then by the
/// lower index. The result lists predictions in processing order.
pub fn match_detections(
    preds: &[KeypointDetection],
    truths: &[KeypointDetection],
    iou_threshold: f64,
) -> Vec<MatchPair> {
    let best_iou: Vec<f64> = preds
        .iter()
        .map(|p| {
            truths
                .iter()
                .filter(|t| t.class_id == p.class_id)
                .map(|t| p.bbox.iou(&t.bbox))
                .fold(0.0, f64::max)
        })
        .collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then(best_iou[b].total_cmp(&best_iou[a]))
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; truths.len()];
    order
        .into_iter()
        .map(|pi| {
            let p = &preds[pi];
            let mut best: Option<(usize, f64)> = None;
            for (ti, t) in truths.iter().enumerate() {
                if taken[ti] || t.class_id != p.class_id {
                    continue;
                }
                let iou = p.bbox.iou(&t.bbox);
                if iou + IOU_EPS >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((ti, iou));
                }
            }
            match best {
                Some((ti, iou)) => {
                    taken[ti] = true;
                    MatchPair {
                        pred: pi,
                        truth: Some(ti),
                        iou,
                    }
                }
                None => MatchPair {
                    pred: pi,
                    truth: None,
                    iou: 0.0,
                },
            }
        })
        .collect()
}
