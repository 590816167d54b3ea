//! `palletkit` command-line tool.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage or I/O error.

mod evaluate;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use palletkit::camera::calibrate_zhang;
use palletkit::detect_io::{parse_yolo_pose_text, OracleDetector};
use palletkit::eval::{error_sweep, sweep_csv};
use palletkit::formats::{
    read_json, write_json, CalibrationViewsFile, FormatError, IntrinsicsFile, KeypointsFile,
    PoseEstimateRecord,
};
use palletkit::pnp::localize_pallet;
use palletkit::synthgen::{
    generate_dataset_with, preset_count, GenerateOptions, RandomizationConfig, SynthError,
};
use palletkit::{FaceKind, PalletFaceModel, Point2d};

pub const THREADS_ENV: &str = "PALLETKIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "palletkit", version, about = "Pallet-face localisation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic keypoint dataset.
    Generate(GenerateArgs),
    /// Calibrate intrinsics from planar-board correspondences.
    Calibrate(CalibrateArgs),
    /// Estimate a pallet pose from four face corners.
    Localize(LocalizeArgs),
    /// Score predictions against a generated dataset.
    Evaluate(EvaluateArgs),
    /// Pose error against distance for oracle keypoints with pixel noise.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_parser = existing_file)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the frame count with a named dataset size.
    #[arg(long, value_parser = ["7.5k", "15k", "30k"])]
    preset: Option<String>,
    /// Leave the generation time out of the manifest.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long, value_parser = existing_file)]
    views: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Image width in px; defaults to the views file, then the observed extent.
    #[arg(long, requires = "height")]
    width: Option<u32>,
    #[arg(long, requires = "width")]
    height: Option<u32>,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[arg(long, value_parser = existing_file)]
    intrinsics: PathBuf,
    #[arg(long)]
    face: FaceArg,
    /// JSON `{"keypoints_px": [[u,v] x4]}` or a YOLO-pose label/prediction line.
    #[arg(long, value_parser = existing_file)]
    keypoints: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of `{frame}.txt` prediction files (or its parent holding `predictions/`).
    #[arg(long, value_parser = existing_dir)]
    pub preds: PathBuf,
    /// Dataset directory written by `generate`.
    #[arg(long, value_parser = existing_dir)]
    pub truth: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Also localise matched predictions and report pose errors.
    #[arg(long)]
    pub poses: bool,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub format: ReportFormat,
    /// Repair predicted quads whose corner winding is inverted.
    #[arg(long)]
    pub reorder_winding: bool,
    /// Camera for `--poses`; defaults to the dataset's camera.
    #[arg(long, value_parser = existing_file)]
    pub intrinsics: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_parser = existing_file)]
    config: PathBuf,
    /// Keypoint noise in px (per axis); replaces the config's noise sigmas.
    #[arg(long)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write per-frame errors as JSON lines.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaceArg {
    Front,
    Side,
}

impl From<FaceArg> for FaceKind {
    fn from(f: FaceArg) -> Self {
        match f {
            FaceArg::Front => FaceKind::Front,
            FaceArg::Side => FaceKind::Side,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Text,
}

fn existing_file(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("file `{s}` does not exist"))
    }
}

fn existing_dir(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_dir() {
        Ok(p)
    } else {
        Err(format!("directory `{s}` does not exist"))
    }
}

/// Error carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Domain(anyhow::Error),
    Io(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

pub fn domain(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Domain(e.into())
}

pub fn io(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Io(e.into())
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Invalid { .. } => domain(e),
            _ => io(e),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { .. } => io(e),
            _ => domain(e),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => return usage_error(e),
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Localize(a) => localize(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.code();
            let (CliError::Domain(inner) | CliError::Io(inner)) = e;
            eprintln!("error: {inner:#}");
            ExitCode::from(code)
        }
    }
}

/// Clap errors exit 2; validation errors also get the subcommand usage.
fn usage_error(e: clap::Error) -> ExitCode {
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        let _ = e.print();
        return ExitCode::SUCCESS;
    }
    let _ = e.print();
    if matches!(e.kind(), ErrorKind::ValueValidation | ErrorKind::InvalidValue) {
        let mut cmd = Cli::command();
        cmd.build();
        let name = std::env::args().nth(1).unwrap_or_default();
        if let Some(sub) = cmd.find_subcommand_mut(&name) {
            eprintln!("\n{}", sub.render_usage());
        }
    }
    ExitCode::from(2)
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RandomizationConfig> {
    let mut cfg: RandomizationConfig = read_json(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config, a.seed)?;
    if let Some(p) = &a.preset {
        cfg.count = preset_count(p).ok_or_else(|| io(anyhow!("unknown preset {p}")))?;
    }
    cfg.validate()?;
    let opts = GenerateOptions {
        threads: None,
        timestamp: !a.no_timestamp,
    };
    let m = generate_dataset_with(&cfg, &a.out, &opts)?;
    println!("sha256 {}", m.sha256);
    println!("frames {} (front {}, side {})", cfg.count, m.counts.front, m.counts.side);
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> CliResult<()> {
    let file: CalibrationViewsFile = read_json(&a.views)?;
    let (w, h) = match (a.width, a.height, file.width, file.height) {
        (Some(w), Some(h), _, _) | (None, None, Some(w), Some(h)) => (w, h),
        _ => {
            let (w, h) = file.observed_extent();
            log::warn!("image size not given; using the observed extent {w}x{h}");
            (w, h)
        }
    };
    let views = file.planar_views::<f64>();
    let cal = calibrate_zhang(&views, w, h).map_err(domain)?;
    write_json(&a.out, &IntrinsicsFile::from_model(&cal.intrinsics, &cal.distortion))?;
    println!("rms_px {:.6}", cal.rms_px);
    Ok(())
}

fn read_keypoints(path: &Path, intr: &IntrinsicsFile) -> CliResult<[Point2d; 4]> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(io)?;
    if text.trim_start().starts_with('{') {
        let kp: KeypointsFile = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .map_err(io)?;
        return Ok(kp.points());
    }
    let fields = text.lines().find(|l| !l.trim().is_empty()).map_or(0, |l| l.split_whitespace().count());
    let dets = parse_yolo_pose_text(&text, fields == palletkit::detect_io::PREDICTION_FIELDS)
        .map_err(|e| domain(anyhow!("{}: {e}", path.display())))?;
    let best = dets
        .iter()
        .max_by(|a, b| a.confidence.total_cmp(&b.confidence))
        .ok_or_else(|| domain(anyhow!("{}: no detections", path.display())))?;
    Ok(best.keypoints_px(intr.width, intr.height))
}

fn localize(a: LocalizeArgs) -> CliResult<()> {
    let file = IntrinsicsFile::load(&a.intrinsics)?;
    let (intr, dist) = file.to_model::<f64>().map_err(|e| domain(anyhow!(e)))?;
    let kp = read_keypoints(&a.keypoints, &file)?;
    let face: FaceKind = a.face.into();
    let est = localize_pallet(&intr, &dist, &PalletFaceModel::new(face), &kp).map_err(domain)?;
    let mut record = PoseEstimateRecord::new(&est);
    record.face = Some(face.name().to_string());
    write_json(&a.out, &record)?;
    let t = est.pose.translation;
    println!(
        "t_m [{:.6}, {:.6}, {:.6}] rms_px {:.6}{}",
        t.x,
        t.y,
        t.z,
        est.rms_reproj_px,
        if est.ambiguous { " (ambiguous)" } else { "" }
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(io(anyhow!("--noise must be a non-negative number")));
    }
    let mut cfg = load_config(&a.config, a.seed)?;
    cfg.noise.sigma_base = a.noise;
    cfg.noise.sigma_light = 0.0;
    cfg.validate()?;
    let (intr, dist) = cfg.camera();
    let res = error_sweep(&cfg, &OracleDetector::new(cfg.clone()), &intr, &dist).map_err(domain)?;
    std::fs::write(&a.out, sweep_csv(&res.rows))
        .with_context(|| format!("writing {}", a.out.display()))
        .map_err(io)?;
    if let Some(path) = &a.records {
        let mut text = String::new();
        for r in &res.records {
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
            text.push('\n');
        }
        std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(io)?;
    }
    for n in &res.notes {
        log::warn!("{n}");
    }
    if !res.failures.is_empty() {
        log::warn!("{} of {} frames could not be localised", res.failures.len(), cfg.count);
    }
    println!(
        "frames {} localised {} bins {}",
        cfg.count,
        res.records.len(),
        res.rows.len() / palletkit::eval::SWEEP_AXES.len()
    );
    Ok(())
}
