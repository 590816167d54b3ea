//! Domain-randomised synthetic keypoint datasets.
//!
//! Each frame draws its class, texture, light level, pallet pose and
//! keypoint noise from its own counter-based stream (ChaCha8 keyed by the
//! config seed, stream = frame index), so a frame is a pure function of
//! `(config, index)` and datasets can be generated in any order or thread
//! layout with identical bytes.
//!
//! Light only feeds the noise model: `sigma = sigma_base + sigma_light * (1 - light)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::camera::{project, Distortion, Intrinsics};
use crate::detect_io::{write_yolo_pose_line, Keypoint, KeypointDetection, NormBox};
use crate::formats::{DistortionFile, IntrinsicsFile};
use crate::geom::{EulerAngles, FaceKind, PalletFaceModel, Point2, PoseRecord};
use crate::RigidPose;

pub const MAX_POSE_ATTEMPTS: usize = 1000;
/// Exact corners must stay at least this far inside the image border.
pub const IMAGE_MARGIN_PX: f64 = 1.0;
/// Marker file present while a dataset is being written (left behind on failure).
pub const PARTIAL_MARKER: &str = ".partial";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unsatisfiable-config: frame {index}: {constraint} after {attempts} attempts")]
    UnsatisfiableConfig {
        index: u64,
        constraint: String,
        attempts: usize,
    },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub sigma_base: f64,
    pub sigma_light: f64,
    pub dropout_prob: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_base: 0.5,
            sigma_light: 1.0,
            dropout_prob: 0.0,
        }
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            sigma_base: 0.0,
            sigma_light: 0.0,
            dropout_prob: 0.0,
        }
    }

    pub fn sigma_for_light(&self, light: f64) -> f64 {
        self.sigma_base + self.sigma_light * (1.0 - light)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationConfig {
    pub seed: u64,
    pub count: u64,
    pub image_width: u32,
    pub image_height: u32,
    pub intrinsics: IntrinsicsFile,
    pub z_range: [f64; 2],
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Rotation about the camera's vertical (y) axis, degrees.
    pub yaw_range: [f64; 2],
    /// Rotation about the camera x axis, degrees.
    pub pitch_range: [f64; 2],
    /// Rotation about the optical axis, degrees.
    pub roll_range: [f64; 2],
    pub light_range: [f64; 2],
    pub texture_ids: Vec<u32>,
    pub front_fraction: f64,
    pub noise: NoiseModel,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 1000,
            image_width: 640,
            image_height: 384,
            intrinsics: IntrinsicsFile {
                fx: 600.0,
                fy: 600.0,
                cx: 320.0,
                cy: 192.0,
                skew: 0.0,
                width: 640,
                height: 384,
                dist: DistortionFile::default(),
            },
            z_range: [0.5, 5.0],
            x_range: [-1.0, 1.0],
            y_range: [-0.3, 0.3],
            yaw_range: [-35.0, 35.0],
            pitch_range: [-5.0, 5.0],
            roll_range: [-5.0, 5.0],
            light_range: [0.2, 1.0],
            texture_ids: (0..8).collect(),
            front_fraction: 0.5,
            noise: NoiseModel::default(),
        }
    }
}

/// Dataset sizes used for the 7.5k / 15k / 30k training sets.
pub const DATASET_PRESETS: [(&str, u64); 3] = [("7.5k", 7_500), ("15k", 15_000), ("30k", 30_000)];

pub fn preset_count(name: &str) -> Option<u64> {
    DATASET_PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
}

impl RandomizationConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.count == 0 {
            return bad("count must be positive");
        }
        let ranges = [
            ("z_range", self.z_range),
            ("x_range", self.x_range),
            ("y_range", self.y_range),
            ("yaw_range", self.yaw_range),
            ("pitch_range", self.pitch_range),
            ("roll_range", self.roll_range),
            ("light_range", self.light_range),
        ];
        for (name, r) in ranges {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return bad(&format!("{name} must be finite with min <= max"));
            }
        }
        if !(self.z_range[0] > 0.0) {
            return bad("z_range min must be positive");
        }
        if !(0.0..=1.0).contains(&self.front_fraction) {
            return bad("front_fraction must lie in [0, 1]");
        }
        if self.texture_ids.is_empty() {
            return bad("texture_ids must not be empty");
        }
        let n = &self.noise;
        if !(n.sigma_base >= 0.0 && n.sigma_light >= 0.0 && (0.0..=1.0).contains(&n.dropout_prob)) {
            return bad("noise parameters must be non-negative with dropout_prob <= 1");
        }
        if self.intrinsics.width != self.image_width || self.intrinsics.height != self.image_height {
            return bad("intrinsics width/height must match the image size");
        }
        self.intrinsics
            .to_model::<f64>()
            .map_err(SynthError::InvalidConfig)?;
        Ok(())
    }

    pub fn camera(&self) -> (Intrinsics<f64>, Distortion<f64>) {
        (self.intrinsics.intrinsics(), self.intrinsics.distortion())
    }
}

/// Axis-aligned box in pixels, top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn normalized(&self, image_w: u32, image_h: u32) -> NormBox {
        let (iw, ih) = (image_w as f64, image_h as f64);
        NormBox {
            cx: (self.x + 0.5 * self.w) / iw,
            cy: (self.y + 0.5 * self.h) / ih,
            w: self.w / iw,
            h: self.h / ih,
        }
    }
}

/// Tight axis-aligned hull of the corners, clamped to `[0, w] x [0, h]`.
pub fn bbox_from_keypoints(corners: &[Point2<f64>; 4], image_w: u32, image_h: u32) -> BBox {
    let (iw, ih) = (image_w as f64, image_h as f64);
    let min_x = corners.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).clamp(0.0, iw);
    let max_x = corners.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).clamp(0.0, iw);
    let min_y = corners.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).clamp(0.0, ih);
    let max_y = corners.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).clamp(0.0, ih);
    BBox {
        x: min_x,
        y: min_y,
        w: max_x - min_x,
        h: max_y - min_y,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub index: u64,
    pub face: FaceKind,
    pub texture_id: u32,
    pub light: f64,
    pub true_pose: RigidPose,
    pub exact_corners_px: [Point2<f64>; 4],
    pub noisy_corners_px: [Point2<f64>; 4],
    /// False when the keypoint was dropped out (visibility 1 in labels).
    pub visible: [bool; 4],
    pub noise_sigma_px: f64,
    pub bbox_px: BBox,
}

/// One line of `truth.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub index: u64,
    pub face: FaceKind,
    pub light: f64,
    pub texture: u32,
    pub pose: PoseRecord,
    pub exact_corners_px: [[f64; 2]; 4],
}

impl From<&SyntheticFrame> for TruthRecord {
    fn from(f: &SyntheticFrame) -> Self {
        TruthRecord {
            index: f.index,
            face: f.face,
            light: f.light,
            texture: f.texture_id,
            pose: PoseRecord::from(&f.true_pose),
            exact_corners_px: f.exact_corners_px.map(|p| [p.x, p.y]),
        }
    }
}

/// The frame's private random stream.
pub fn frame_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        // Still consume a draw so the stream layout does not depend on the
        // range widths.
        let _: f64 = rng.random();
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Samples frame `index`; identical `(config, index)` always yields an
/// identical frame.
pub fn sample_frame(config: &RandomizationConfig, index: u64) -> Result<SyntheticFrame, SynthError> {
    let (intr, dist) = config.camera();
    let mut rng = frame_rng(config.seed, index);

    let class_draw: f64 = rng.random();
    let face = if class_draw < config.front_fraction {
        FaceKind::Front
    } else {
        FaceKind::Side
    };
    let texture_id = config.texture_ids[rng.random_range(0..config.texture_ids.len())];
    let light = draw(&mut rng, config.light_range);
    let model = PalletFaceModel::<f64>::new(face);
    let corners3 = model.canonical_corners();

    let mut behind = 0usize;
    let mut outside = 0usize;
    let mut found = None;
    for _ in 0..MAX_POSE_ATTEMPTS {
        let z = draw(&mut rng, config.z_range);
        let x = draw(&mut rng, config.x_range);
        let y = draw(&mut rng, config.y_range);
        let yaw = draw(&mut rng, config.yaw_range);
        let pitch = draw(&mut rng, config.pitch_range);
        let roll = draw(&mut rng, config.roll_range);
        let pose = RigidPose::from_euler(&EulerAngles::new(pitch, yaw, roll), Vector3::new(x, y, z));
        let mut px = [Point2::origin(); 4];
        let mut ok = true;
        for (dst, c) in px.iter_mut().zip(&corners3) {
            match project(&intr, &dist, &pose, c) {
                Ok(p) => *dst = p,
                Err(_) => {
                    behind += 1;
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        if px.iter().all(|p| intr.contains(p, IMAGE_MARGIN_PX)) {
            found = Some((pose, px));
            break;
        }
        outside += 1;
    }
    let Some((true_pose, exact)) = found else {
        let constraint = if outside >= behind {
            format!(
                "pallet corners fall outside the {}x{} image (margin {IMAGE_MARGIN_PX} px)",
                config.image_width, config.image_height
            )
        } else {
            "pallet corners lie behind the camera".to_string()
        };
        return Err(SynthError::UnsatisfiableConfig {
            index,
            constraint,
            attempts: MAX_POSE_ATTEMPTS,
        });
    };

    let sigma = config.noise.sigma_for_light(light);
    let mut noisy = exact;
    let mut visible = [true; 4];
    for (p, v) in noisy.iter_mut().zip(visible.iter_mut()) {
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        p.x += sigma * nx;
        p.y += sigma * ny;
        let u: f64 = rng.random();
        *v = u >= config.noise.dropout_prob;
    }
    Ok(SyntheticFrame {
        index,
        face,
        texture_id,
        light,
        true_pose,
        exact_corners_px: exact,
        noisy_corners_px: noisy,
        visible,
        noise_sigma_px: sigma,
        bbox_px: bbox_from_keypoints(&exact, config.image_width, config.image_height),
    })
}

/// Ground-truth detection for the frame (exact corners, confidence 1).
pub fn frame_label(frame: &SyntheticFrame, image_w: u32, image_h: u32) -> KeypointDetection {
    let (iw, ih) = (image_w as f64, image_h as f64);
    KeypointDetection {
        class_id: frame.face.class_id(),
        confidence: 1.0,
        bbox: frame.bbox_px.normalized(image_w, image_h),
        keypoints: std::array::from_fn(|i| Keypoint {
            x: frame.exact_corners_px[i].x / iw,
            y: frame.exact_corners_px[i].y / ih,
            visibility: if frame.visible[i] { 2 } else { 1 },
        }),
    }
}

/// YOLO-pose label line (without trailing newline).
pub fn write_yolo_pose_label(frame: &SyntheticFrame, image_w: u32, image_h: u32) -> String {
    write_yolo_pose_line(&frame_label(frame, image_w, image_h), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub front: u64,
    pub side: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: RandomizationConfig,
    pub counts: ClassCounts,
    /// SHA-256 of all label files concatenated in frame order.
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at_unix: Option<u64>,
}

pub fn label_path(dir: &Path, index: u64) -> PathBuf {
    dir.join("labels").join(format!("{index:06}.txt"))
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    /// Worker threads; `None` uses the ambient rayon pool.
    pub threads: Option<usize>,
    /// Record the wall-clock time in the manifest (breaks byte-identity).
    pub timestamp: bool,
}

pub fn generate_dataset(config: &RandomizationConfig, output_dir: &Path) -> Result<DatasetManifest, SynthError> {
    generate_dataset_with(config, output_dir, &GenerateOptions::default())
}

/// Writes `labels/{index:06}.txt`, `truth.jsonl` and `manifest.json`.
pub fn generate_dataset_with(
    config: &RandomizationConfig,
    output_dir: &Path,
    opts: &GenerateOptions,
) -> Result<DatasetManifest, SynthError> {
    config.validate()?;
    let labels_dir = output_dir.join("labels");
    fs::create_dir_all(&labels_dir).map_err(io_err(&labels_dir))?;
    let marker = output_dir.join(PARTIAL_MARKER);
    fs::write(&marker, b"generation in progress\n").map_err(io_err(&marker))?;

    let result = match opts.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| SynthError::InvalidConfig(format!("thread pool: {e}")))?;
            pool.install(|| write_frames(config, output_dir))
        }
        None => write_frames(config, output_dir),
    };
    let manifest = match result {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::write(&marker, format!("generation failed: {e}\n"));
            return Err(e);
        }
    };
    let manifest = DatasetManifest {
        generated_at_unix: opts.timestamp.then(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        }),
        ..manifest
    };
    let manifest_path = output_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    fs::remove_file(&marker).map_err(io_err(&marker))?;
    Ok(manifest)
}

fn write_frames(config: &RandomizationConfig, dir: &Path) -> Result<DatasetManifest, SynthError> {
    let outputs: Vec<(FaceKind, String, String)> = (0..config.count)
        .into_par_iter()
        .map(|i| {
            let frame = sample_frame(config, i)?;
            let mut label = write_yolo_pose_label(&frame, config.image_width, config.image_height);
            label.push('\n');
            let path = label_path(dir, i);
            fs::write(&path, label.as_bytes()).map_err(io_err(&path))?;
            let truth = serde_json::to_string(&TruthRecord::from(&frame)).expect("truth serializes");
            Ok((frame.face, label, truth))
        })
        .collect::<Result<_, SynthError>>()?;

    let mut hasher = Sha256::new();
    let mut counts = ClassCounts { front: 0, side: 0 };
    let truth_path = dir.join("truth.jsonl");
    let file = fs::File::create(&truth_path).map_err(io_err(&truth_path))?;
    let mut w = std::io::BufWriter::new(file);
    for (face, label, truth) in &outputs {
        hasher.update(label.as_bytes());
        match face {
            FaceKind::Front => counts.front += 1,
            FaceKind::Side => counts.side += 1,
        }
        w.write_all(truth.as_bytes()).map_err(io_err(&truth_path))?;
        w.write_all(b"\n").map_err(io_err(&truth_path))?;
    }
    w.flush().map_err(io_err(&truth_path))?;
    Ok(DatasetManifest {
        config: config.clone(),
        counts,
        sha256: hex::encode(hasher.finalize()),
        generated_at_unix: None,
    })
}

/// Reads `truth.jsonl`.
pub fn read_truth(dir: &Path) -> Result<Vec<TruthRecord>, SynthError> {
    let path = dir.join("truth.jsonl");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| SynthError::Io {
                path: path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}
