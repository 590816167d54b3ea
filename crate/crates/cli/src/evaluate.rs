//! `evaluate` subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;

use palletkit::detect_io::{
    canonicalize_winding, match_detections, parse_yolo_pose_text, DetectIoError, Detector,
    FilePredictionAdapter,
};
use palletkit::eval::{
    compute_kme, compute_map, pose_error, DetectionMetrics, EvalFrame, KmeReport, PoseDelta,
    PoseErrorReport, PoseErrorRow,
};
use palletkit::formats::{read_json, IntrinsicsFile};
use palletkit::pnp::localize_pallet;
use palletkit::synthgen::{read_truth, DatasetManifest};
use palletkit::{FaceKind, PalletFaceModel, RigidPose};

use crate::{domain, io, CliResult, EvaluateArgs, ReportFormat};

#[derive(Debug, Serialize)]
struct EvaluationReport {
    frames: usize,
    /// Frames with ground truth but no prediction file; scored as all-miss.
    missing_prediction_frames: Vec<u64>,
    detection: DetectionMetrics,
    kme: KmeReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    poses: Option<PoseErrorReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pose_failures: Option<usize>,
}

fn label_frames(dir: &Path) -> CliResult<Vec<(u64, PathBuf)>> {
    let labels = dir.join("labels");
    let entries = fs::read_dir(&labels)
        .with_context(|| format!("reading {}", labels.display()))
        .map_err(io)?;
    let mut out = Vec::new();
    for e in entries {
        let path = e.map_err(io)?.path();
        if path.extension().and_then(|x| x.to_str()) != Some("txt") {
            continue;
        }
        if let Some(id) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
        {
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

fn camera(args: &EvaluateArgs, manifest: Option<&DatasetManifest>) -> CliResult<Option<IntrinsicsFile>> {
    if let Some(p) = &args.intrinsics {
        return Ok(Some(IntrinsicsFile::load(p)?));
    }
    Ok(manifest.map(|m| m.config.intrinsics))
}

fn predictions_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("predictions");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

pub fn run(args: EvaluateArgs) -> CliResult<()> {
    if !(args.iou > 0.0 && args.iou < 1.0) {
        return Err(io(anyhow!("--iou must lie in (0, 1)")));
    }
    let manifest_path = args.truth.join("manifest.json");
    let manifest: Option<DatasetManifest> = if manifest_path.is_file() {
        Some(read_json(&manifest_path)?)
    } else {
        None
    };
    let cam = camera(&args, manifest.as_ref())?;
    let (w, h) = match (&manifest, &cam) {
        (Some(m), _) => (m.config.image_width, m.config.image_height),
        (None, Some(c)) => (c.width, c.height),
        (None, None) => {
            return Err(io(anyhow!(
                "no manifest.json in {}; pass --intrinsics to give the image size",
                args.truth.display()
            )))
        }
    };

    let adapter = FilePredictionAdapter::new(&predictions_dir(&args.preds)).map_err(io)?;
    let mut frames = Vec::new();
    let mut missing = Vec::new();
    for (id, path) in label_frames(&args.truth)? {
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(io)?;
        let truths = parse_yolo_pose_text(&text, false)
            .map_err(|e| domain(anyhow!("{}: {e}", path.display())))?;
        let preds = match adapter.detect(id) {
            Ok(f) => f.detections,
            Err(DetectIoError::MissingFrame(_)) => {
                log::warn!("no predictions for frame {id}; counting its instances as missed");
                missing.push(id);
                Vec::new()
            }
            Err(e @ DetectIoError::Io { .. }) => return Err(io(e)),
            Err(e) => return Err(domain(anyhow!("predictions for frame {id}: {e}"))),
        };
        let preds = if args.reorder_winding {
            preds.iter().map(canonicalize_winding).collect()
        } else {
            preds
        };
        frames.push(EvalFrame { frame: id, preds, truths });
    }
    if frames.is_empty() {
        return Err(io(anyhow!("no label files under {}", args.truth.join("labels").display())));
    }

    let detection = compute_map(&frames).map_err(domain)?;
    let kme = compute_kme(&frames, w, h, args.iou).map_err(domain)?;
    let (poses, pose_failures) = if args.poses {
        let cam = cam.ok_or_else(|| io(anyhow!("--poses needs a manifest.json or --intrinsics")))?;
        let (rows, failures) = pose_rows(&args.truth, &frames, &cam, args.iou)?;
        (Some(PoseErrorReport::new(rows)), Some(failures))
    } else {
        (None, None)
    };
    let report = EvaluationReport {
        frames: frames.len(),
        missing_prediction_frames: missing,
        detection,
        kme,
        poses,
        pose_failures,
    };
    let text = match args.format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Text => to_text(&report),
    };
    fs::write(&args.report, text)
        .with_context(|| format!("writing {}", args.report.display()))
        .map_err(io)?;
    println!(
        "map50 {:.4} map50_95 {:.4} kme_px {:.4}",
        report.detection.map50, report.detection.map50_95, report.kme.mean_px
    );
    Ok(())
}

fn pose_rows(
    truth_dir: &Path,
    frames: &[EvalFrame],
    cam: &IntrinsicsFile,
    iou: f64,
) -> CliResult<(Vec<PoseErrorRow>, usize)> {
    let truth: BTreeMap<u64, RigidPose> = read_truth(truth_dir)?
        .into_iter()
        .map(|r| r.pose.to_pose().map(|p| (r.index, p)))
        .collect::<Result<_, _>>()
        .map_err(|e| domain(anyhow!("truth.jsonl: {e}")))?;
    let (intr, dist) = cam.to_model::<f64>().map_err(|e| domain(anyhow!(e)))?;
    let mut by_face: BTreeMap<&'static str, Vec<PoseDelta>> = BTreeMap::new();
    let mut failures = 0;
    for f in frames {
        let Some(true_pose) = truth.get(&f.frame) else {
            log::warn!("frame {} has no truth pose", f.frame);
            continue;
        };
        for m in match_detections(&f.preds, &f.truths, iou) {
            if m.truth.is_none() {
                continue;
            }
            let p = &f.preds[m.pred];
            let Some(face) = FaceKind::from_class_id(p.class_id) else { continue };
            let kp = p.keypoints_px(cam.width, cam.height);
            match localize_pallet(&intr, &dist, &PalletFaceModel::new(face), &kp) {
                Ok(est) => {
                    let d = pose_error(&est.pose, true_pose);
                    by_face.entry(face.name()).or_default().push(d);
                    by_face.entry("all").or_default().push(d);
                }
                Err(e) => {
                    log::warn!("frame {}: {e}", f.frame);
                    failures += 1;
                }
            }
        }
    }
    let rows = ["front", "side", "all"]
        .iter()
        .filter_map(|k| by_face.get(k).map(|d| PoseErrorRow::from_deltas(*k, d)))
        .collect();
    Ok((rows, failures))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn to_text(r: &EvaluationReport) -> String {
    let mut s = String::new();
    let d = &r.detection;
    writeln!(s, "frames            {}", r.frames).unwrap();
    writeln!(s, "missing preds     {}", r.missing_prediction_frames.len()).unwrap();
    writeln!(s, "mAP50             {:.4}", d.map50).unwrap();
    writeln!(s, "mAP50-95          {:.4}", d.map50_95).unwrap();
    writeln!(s).unwrap();
    writeln!(s, "{:<8} {:>8} {:>8} {:>7} {:>7}", "class", "AP50", "AP50-95", "truths", "preds").unwrap();
    for c in &d.per_class {
        writeln!(
            s,
            "{:<8} {:>8} {:>8} {:>7} {:>7}",
            c.class_name,
            fmt_opt(c.ap50),
            fmt_opt(c.ap50_95),
            c.n_truth,
            c.n_pred
        )
        .unwrap();
    }
    writeln!(s).unwrap();
    writeln!(s, "# {}", r.kme.note).unwrap();
    writeln!(s, "KME px            {:.4}", r.kme.mean_px).unwrap();
    writeln!(s, "KME / diagonal    {:.6e}", r.kme.mean_normalised).unwrap();
    writeln!(s, "matched instances {}", r.kme.matched_instances).unwrap();
    if let Some(p) = &r.poses {
        writeln!(s).unwrap();
        s.push_str(&p.to_text());
        if let Some(f) = r.pose_failures {
            writeln!(s, "pose failures     {f}").unwrap();
        }
    }
    s
}
