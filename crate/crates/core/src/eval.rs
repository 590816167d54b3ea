//! Detection and pose metrics: AP / mAP, keypoint mean error, signed
//! per-axis pose errors, marker-based ground truth and distance sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Distortion, Intrinsics};
use crate::detect_io::{match_detections, Detector, KeypointDetection};
use crate::geom::{
    rectangle_corners, wrap_degrees, FaceKind, PalletFaceModel, Point2, PoseRecord,
    EULER_CONVENTION,
};
use crate::pnp::{estimate_planar_pose, localize_pallet, PnpError};
use crate::synthgen::{sample_frame, RandomizationConfig};
use crate::RigidPose;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

pub const SWEEP_BIN_M: f64 = 0.25;
pub const SWEEP_CSV_HEADER: &str = "z_bin_m,axis,mean,median,p95,n";
pub const KME_UNIT_NOTE: &str = "mean_px is raw pixels; mean_normalised divides by the image diagonal. \
The published KME unit (pixel error x1e-6) is ambiguous, so both scales are reported.";
pub const ERROR_CONVENTION: &str = "estimate - ground truth; translation in cm, rotation in degrees";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no-matches: no prediction matched a ground-truth instance")]
    NoMatches,
    #[error("no-ground-truth: no class has ground-truth instances")]
    NoGroundTruth,
    #[error("invalid-input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Pnp(#[from] PnpError<f64>),
}

/// Predictions and ground truth for one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalFrame {
    pub frame: u64,
    pub preds: Vec<KeypointDetection>,
    pub truths: Vec<KeypointDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    /// `None` when the class has no ground-truth instances.
    pub ap: Option<f64>,
    pub n_truth: usize,
    pub n_pred: usize,
}

struct Scored {
    confidence: f64,
    tp: bool,
}

fn scored_predictions(frames: &[EvalFrame], iou_threshold: f64) -> BTreeMap<u32, (Vec<Scored>, usize)> {
    let mut by_class: BTreeMap<u32, (Vec<Scored>, usize)> = BTreeMap::new();
    for f in frames {
        for t in &f.truths {
            by_class.entry(t.class_id).or_default().1 += 1;
        }
        for m in match_detections(&f.preds, &f.truths, iou_threshold) {
            let p = &f.preds[m.pred];
            by_class.entry(p.class_id).or_default().0.push(Scored {
                confidence: p.confidence,
                tp: m.truth.is_some(),
            });
        }
    }
    by_class
}

/// Precision envelope and recall of the ranked predictions.
fn pr_envelope(scored: &mut [Scored], n_truth: usize) -> (Vec<f64>, Vec<f64>) {
    // Stable sort keeps the per-frame processing order among equal scores.
    scored.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    for s in scored.iter() {
        if s.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_truth as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (recall, precision)
}

fn integrate(recall: &[f64], precision: &[f64]) -> f64 {
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// All-point interpolated AP per class at one IoU threshold.
pub fn compute_ap(frames: &[EvalFrame], iou_threshold: f64) -> Vec<ClassAp> {
    scored_predictions(frames, iou_threshold)
        .into_iter()
        .map(|(class_id, (mut scored, n_truth))| {
            let n_pred = scored.len();
            let ap = (n_truth > 0).then(|| {
                let (r, p) = pr_envelope(&mut scored, n_truth);
                integrate(&r, &p)
            });
            ClassAp {
                class_id,
                ap,
                n_truth,
                n_pred,
            }
        })
        .collect()
}

fn mean_defined(aps: &[ClassAp]) -> Option<f64> {
    let v: Vec<f64> = aps.iter().filter_map(|c| c.ap).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: u32,
    /// Interpolated precision at recall 0.00, 0.01, ..., 1.00 (IoU 0.5).
    pub precision_at_recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassApRow {
    pub class_id: u32,
    pub class_name: String,
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
    pub n_truth: usize,
    pub n_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub map50: f64,
    pub map50_95: f64,
    pub per_class: Vec<ClassApRow>,
    pub pr_curves: Vec<PrCurve>,
    /// Classes excluded from the means for lack of ground truth.
    pub excluded_classes: Vec<u32>,
}

fn class_name(id: u32) -> String {
    FaceKind::from_class_id(id)
        .map(|k| k.name().to_string())
        .unwrap_or_else(|| format!("class{id}"))
}

pub fn compute_map(frames: &[EvalFrame]) -> Result<DetectionMetrics, EvalError> {
    let thresholds = coco_thresholds();
    let per_threshold: Vec<Vec<ClassAp>> = thresholds.iter().map(|&t| compute_ap(frames, t)).collect();
    let map50 = mean_defined(&per_threshold[0]).ok_or(EvalError::NoGroundTruth)?;
    let map50_95 = per_threshold
        .iter()
        .map(|aps| mean_defined(aps).unwrap_or(0.0))
        .sum::<f64>()
        / thresholds.len() as f64;

    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for c in &per_threshold[0] {
        let ap50_95 = c.ap.map(|_| {
            per_threshold
                .iter()
                .map(|aps| {
                    aps.iter()
                        .find(|x| x.class_id == c.class_id)
                        .and_then(|x| x.ap)
                        .unwrap_or(0.0)
                })
                .sum::<f64>()
                / thresholds.len() as f64
        });
        if c.ap.is_none() {
            log::warn!(
                "class {} has no ground-truth instances; AP undefined and excluded from the mean",
                c.class_id
            );
            excluded.push(c.class_id);
        }
        per_class.push(ClassApRow {
            class_id: c.class_id,
            class_name: class_name(c.class_id),
            ap50: c.ap,
            ap50_95,
            n_truth: c.n_truth,
            n_pred: c.n_pred,
        });
    }

    let pr_curves = scored_predictions(frames, thresholds[0])
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(class_id, (mut scored, n_truth))| {
            let (r, p) = pr_envelope(&mut scored, n_truth);
            let precision_at_recall = (0..=100)
                .map(|k| {
                    let level = k as f64 / 100.0;
                    r.iter()
                        .position(|&x| x + 1e-12 >= level)
                        .map(|i| p[i])
                        .unwrap_or(0.0)
                })
                .collect();
            PrCurve {
                class_id,
                precision_at_recall,
            }
        })
        .collect();

    Ok(DetectionMetrics {
        map50,
        map50_95,
        per_class,
        pr_curves,
        excluded_classes: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeReport {
    pub mean_px: f64,
    pub mean_normalised: f64,
    /// Mean distance of each corner (TL, TR, BR, BL), px.
    pub per_corner_px: [f64; 4],
    pub matched_instances: usize,
    pub note: String,
}

/// Keypoint mean error over matched instances, order-aligned corners.
pub fn compute_kme(
    frames: &[EvalFrame],
    image_w: u32,
    image_h: u32,
    iou_threshold: f64,
) -> Result<KmeReport, EvalError> {
    let mut sum = 0.0;
    let mut corner_sum = [0.0; 4];
    let mut n = 0usize;
    for f in frames {
        for m in match_detections(&f.preds, &f.truths, iou_threshold) {
            let Some(ti) = m.truth else { continue };
            let p = f.preds[m.pred].keypoints_px(image_w, image_h);
            let t = f.truths[ti].keypoints_px(image_w, image_h);
            let d: [f64; 4] = std::array::from_fn(|i| (p[i] - t[i]).norm());
            for i in 0..4 {
                corner_sum[i] += d[i];
            }
            sum += d.iter().sum::<f64>() / 4.0;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::NoMatches);
    }
    let mean_px = sum / n as f64;
    let diag = (image_w as f64).hypot(image_h as f64);
    Ok(KmeReport {
        mean_px,
        mean_normalised: mean_px / diag,
        per_corner_px: corner_sum.map(|s| s / n as f64),
        matched_instances: n,
        note: KME_UNIT_NOTE.to_string(),
    })
}

/// Signed pose error, estimate minus truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub dx_cm: f64,
    pub dy_cm: f64,
    pub dz_cm: f64,
    pub drx_deg: f64,
    pub dry_deg: f64,
    pub drz_deg: f64,
    /// False when either pose sits at the Euler singularity.
    pub reliable: bool,
}

impl PoseDelta {
    pub fn components(&self) -> [f64; 6] {
        [
            self.dx_cm,
            self.dy_cm,
            self.dz_cm,
            self.drx_deg,
            self.dry_deg,
            self.drz_deg,
        ]
    }
}

pub fn pose_error(estimate: &RigidPose, truth: &RigidPose) -> PoseDelta {
    let dt = (estimate.translation - truth.translation) * 100.0;
    let (a, b) = (estimate.euler(), truth.euler());
    PoseDelta {
        dx_cm: dt.x,
        dy_cm: dt.y,
        dz_cm: dt.z,
        drx_deg: wrap_degrees(a.rx - b.rx),
        dry_deg: wrap_degrees(a.ry - b.ry),
        drz_deg: wrap_degrees(a.rz - b.rz),
        reliable: !(a.gimbal_lock || b.gimbal_lock),
    }
}

pub const AXES: [&str; 6] = ["x", "y", "z", "rx", "ry", "rz"];

/// One evaluated configuration: columns follow [`AXES`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorRow {
    pub config: String,
    pub n: usize,
    pub unreliable: usize,
    pub signed_mean: [f64; 6],
    pub abs_mean: [f64; 6],
    pub rmse: [f64; 6],
}

impl PoseErrorRow {
    pub fn from_deltas(config: impl Into<String>, deltas: &[PoseDelta]) -> Self {
        let n = deltas.len();
        let mut signed = [0.0; 6];
        let mut abs = [0.0; 6];
        let mut sq = [0.0; 6];
        for d in deltas {
            for (i, v) in d.components().into_iter().enumerate() {
                signed[i] += v;
                abs[i] += v.abs();
                sq[i] += v * v;
            }
        }
        let k = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        PoseErrorRow {
            config: config.into(),
            n,
            unreliable: deltas.iter().filter(|d| !d.reliable).count(),
            signed_mean: signed.map(|s| s * k),
            abs_mean: abs.map(|s| s * k),
            rmse: sq.map(|s| (s * k).sqrt()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorReport {
    pub error_convention: String,
    pub euler_convention: String,
    pub rows: Vec<PoseErrorRow>,
}

impl PoseErrorReport {
    pub fn new(rows: Vec<PoseErrorRow>) -> Self {
        PoseErrorReport {
            error_convention: ERROR_CONVENTION.to_string(),
            euler_convention: EULER_CONVENTION.to_string(),
            rows,
        }
    }

    /// Aligned-column table: for each configuration a signed-mean line, then
    /// mean-absolute (`absmean`) and RMSE lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# error: {}", self.error_convention).unwrap();
        writeln!(s, "# euler: {}", self.euler_convention).unwrap();
        let cw = self
            .rows
            .iter()
            .map(|r| r.config.len())
            .max()
            .unwrap_or(0)
            .max("config".len());
        write!(s, "{:<cw$}  {:<7} {:>7}", "config", "stat", "n").unwrap();
        for (i, a) in AXES.iter().enumerate() {
            let unit = if i < 3 { "cm" } else { "deg" };
            write!(s, " {:>11}", format!("{a} ({unit})")).unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            for (stat, vals) in [("mean", &r.signed_mean), ("absmean", &r.abs_mean), ("rmse", &r.rmse)] {
                write!(s, "{:<cw$}  {:<7} {:>7}", r.config, stat, r.n).unwrap();
                for v in vals {
                    write!(s, " {:>11.3}", v).unwrap();
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Square marker observation with the rigid offset from marker to pallet.
#[derive(Debug, Clone, PartialEq)]
pub struct ArucoGroundTruth {
    pub side_m: f64,
    /// Marker corners TL, TR, BR, BL in pixels.
    pub corners_px: [Point2<f64>; 4],
    /// Pallet frame expressed in the marker frame.
    pub offset: RigidPose,
}

/// `{"side_m": s, "corners_px": [[u,v] x4], "offset_pose": {...}}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArucoGroundTruthFile {
    pub side_m: f64,
    pub corners_px: [[f64; 2]; 4],
    pub offset_pose: PoseRecord,
}

impl ArucoGroundTruthFile {
    pub fn to_model(&self) -> Result<ArucoGroundTruth, EvalError> {
        let offset = self
            .offset_pose
            .to_pose()
            .map_err(|e| EvalError::InvalidInput(e.to_string()))?;
        let gt = ArucoGroundTruth {
            side_m: self.side_m,
            corners_px: self.corners_px.map(|c| Point2::new(c[0], c[1])),
            offset,
        };
        gt.validate()?;
        Ok(gt)
    }
}

impl ArucoGroundTruth {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.side_m > 0.0 && self.side_m.is_finite()) {
            return Err(EvalError::InvalidInput(format!(
                "marker side must be positive, got {}",
                self.side_m
            )));
        }
        if !self.offset.is_valid(1e-6) {
            return Err(EvalError::InvalidInput("offset pose is not a rigid transform".into()));
        }
        Ok(())
    }
}

/// Pallet pose implied by an observed marker.
pub fn aruco_ground_truth(
    intr: &Intrinsics<f64>,
    dist: &Distortion<f64>,
    gt: &ArucoGroundTruth,
) -> Result<RigidPose, EvalError> {
    gt.validate()?;
    let square = rectangle_corners(gt.side_m, gt.side_m);
    let marker = estimate_planar_pose(intr, dist, &square, &gt.corners_px)?;
    Ok(marker.pose.compose(&gt.offset))
}

/// One localised frame of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub frame: u64,
    pub face: FaceKind,
    pub true_z_m: f64,
    pub delta: PoseDelta,
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub frame: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Lower edge of the distance bin.
    pub z_bin_m: f64,
    pub axis: String,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
    /// Empty bins inside the covered distance span.
    pub notes: Vec<String>,
}

/// Signed axes then their magnitudes, in CSV order.
pub const SWEEP_AXES: [&str; 12] = [
    "dx", "dy", "dz", "drx", "dry", "drz", "abs_dx", "abs_dy", "abs_dz", "abs_drx", "abs_dry",
    "abs_drz",
];

fn localize_frame(
    config: &RandomizationConfig,
    detector: &dyn Detector,
    intr: &Intrinsics<f64>,
    dist: &Distortion<f64>,
    index: u64,
) -> Result<SweepRecord, String> {
    let truth = sample_frame(config, index).map_err(|e| e.to_string())?;
    let dets = detector.detect(index).map_err(|e| e.to_string())?;
    let det = dets
        .detections
        .iter()
        .max_by(|a, b| a.confidence.total_cmp(&b.confidence))
        .ok_or_else(|| "no detection".to_string())?;
    let face = FaceKind::from_class_id(det.class_id)
        .ok_or_else(|| format!("unknown class {}", det.class_id))?;
    let kp = det.keypoints_px(config.image_width, config.image_height);
    let est = localize_pallet(intr, dist, &PalletFaceModel::new(face), &kp).map_err(|e| e.to_string())?;
    Ok(SweepRecord {
        frame: index,
        face,
        true_z_m: truth.true_pose.translation.z,
        delta: pose_error(&est.pose, &truth.true_pose),
        ambiguous: est.ambiguous,
    })
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Per-bin statistics of a set of sweep records.
pub fn bin_records(records: &[SweepRecord]) -> (Vec<SweepRow>, Vec<String>) {
    let mut bins: BTreeMap<i64, Vec<&SweepRecord>> = BTreeMap::new();
    for r in records {
        bins.entry((r.true_z_m / SWEEP_BIN_M).floor() as i64)
            .or_default()
            .push(r);
    }
    let mut notes = Vec::new();
    if let (Some(&lo), Some(&hi)) = (bins.keys().next(), bins.keys().next_back()) {
        for b in lo..=hi {
            if !bins.contains_key(&b) {
                notes.push(format!("bin {:.2} m is empty; row omitted", b as f64 * SWEEP_BIN_M));
            }
        }
    }
    let mut rows = Vec::new();
    for (b, recs) in bins {
        for (ai, axis) in SWEEP_AXES.iter().enumerate() {
            let mut v: Vec<f64> = recs
                .iter()
                .map(|r| {
                    let c = r.delta.components()[ai % 6];
                    if ai < 6 {
                        c
                    } else {
                        c.abs()
                    }
                })
                .collect();
            v.sort_by(f64::total_cmp);
            rows.push(SweepRow {
                z_bin_m: b as f64 * SWEEP_BIN_M,
                axis: axis.to_string(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                median: quantile(&v, 0.5),
                p95: quantile(&v, 0.95),
                n: v.len(),
            });
        }
    }
    (rows, notes)
}

/// Localises every frame of `config` from `detector` output and bins the
/// pose errors by true depth. Frames run in parallel; output order is by
/// frame index.
pub fn error_sweep(
    config: &RandomizationConfig,
    detector: &dyn Detector,
    intr: &Intrinsics<f64>,
    dist: &Distortion<f64>,
) -> Result<SweepResult, EvalError> {
    config
        .validate()
        .map_err(|e| EvalError::InvalidInput(e.to_string()))?;
    let outcomes: Vec<Result<SweepRecord, SweepFailure>> = (0..config.count)
        .into_par_iter()
        .map(|i| {
            localize_frame(config, detector, intr, dist, i)
                .map_err(|reason| SweepFailure { frame: i, reason })
        })
        .collect();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    let (rows, notes) = bin_records(&records);
    Ok(SweepResult {
        records,
        rows,
        failures,
        notes,
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{:.2},{},{:.6},{:.6},{:.6},{}",
            r.z_bin_m, r.axis, r.mean, r.median, r.p95, r.n
        )
        .unwrap();
    }
    s
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
}
