//! Run artifacts: trajectory text, metrics JSON lines, map checkpoint
//! (splat-format Gaussians plus JSON metadata) and the configuration used.
//!
//! Floating-point values are written in shortest round-trip form, so reading
//! an artifact back reproduces the written values exactly.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::geometry::{PinholeCamera, SE3Pose};
use crate::pipeline::{EvalReport, FrameMetrics, RunOutput, TrajectoryEntry};
use crate::splat::{load_gaussians, save_gaussians, Gaussian3D};

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MAP_FILE: &str = "map.igs";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FORMAT: &str = "gsslam-checkpoint-v1";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), OutputError> {
    fs::write(path, text).map_err(io_err(path))
}

/// One line per keyframe: `timestamp tx ty tz qx qy qz qw`.
pub fn format_trajectory(entries: &[TrajectoryEntry]) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for e in entries {
        let t = e.pose.translation;
        let q = e.pose.rotation.quaternion();
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        ));
    }
    out
}

pub fn write_trajectory(path: &Path, entries: &[TrajectoryEntry]) -> Result<(), OutputError> {
    write_text(path, &format_trajectory(entries))
}

/// Reads `(timestamp, pose)` pairs; blank lines and `#` comments are skipped.
pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, SE3Pose)>, OutputError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| OutputError::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            reason,
        };
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| malformed(format!("{v:?}: {e}")))
            })
            .collect::<Result<_, _>>()?;
        if values.len() != 8 {
            return Err(malformed(format!(
                "expected 8 values, found {}",
                values.len()
            )));
        }
        let q = Vector4::new(values[4], values[5], values[6], values[7]);
        if !(q.norm() > 0.0) || values.iter().any(|v| !v.is_finite()) {
            return Err(malformed("non-finite value or zero quaternion".into()));
        }
        let pose = SE3Pose::from_tum([values[1], values[2], values[3]], [q[0], q[1], q[2], q[3]]);
        out.push((values[0], pose));
    }
    Ok(out)
}

/// Summary line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub frames: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_depth_l1: Option<f64>,
    pub ate_rmse: f64,
    pub alignment_scale: f64,
    pub keyframes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsRecord {
    Frame(FrameMetrics),
    Summary(MetricsSummary),
}

/// One JSON object per evaluated frame followed by one summary object.
pub fn format_metrics(report: &EvalReport) -> String {
    let mut out = String::new();
    let summary = MetricsSummary {
        frames: report.frames.len(),
        mean_psnr: report.mean_psnr,
        mean_ssim: report.mean_ssim,
        mean_depth_l1: report.mean_depth_l1,
        ate_rmse: report.ate_rmse,
        alignment_scale: report.alignment_scale,
        keyframes: report.keyframes,
    };
    let records = report
        .frames
        .iter()
        .cloned()
        .map(MetricsRecord::Frame)
        .chain(std::iter::once(MetricsRecord::Summary(summary)));
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

pub fn write_metrics(path: &Path, report: &EvalReport) -> Result<(), OutputError> {
    write_text(path, &format_metrics(report))
}

pub fn read_metrics(path: &Path) -> Result<EvalReport, OutputError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut frames = Vec::new();
    let mut summary = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord =
            serde_json::from_str(line).map_err(|e| OutputError::Malformed {
                path: path.to_path_buf(),
                line: n + 1,
                reason: e.to_string(),
            })?;
        match record {
            MetricsRecord::Frame(f) => frames.push(f),
            MetricsRecord::Summary(s) => summary = Some(s),
        }
    }
    let s = summary
        .ok_or_else(|| OutputError::Invalid(format!("{}: no summary record", path.display())))?;
    Ok(EvalReport {
        frames,
        mean_psnr: s.mean_psnr,
        mean_ssim: s.mean_ssim,
        mean_depth_l1: s.mean_depth_l1,
        ate_rmse: s.ate_rmse,
        alignment_scale: s.alignment_scale,
        keyframes: s.keyframes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl From<&PinholeCamera> for CameraRecord {
    fn from(c: &PinholeCamera) -> Self {
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}

impl CameraRecord {
    pub fn camera(&self) -> Result<PinholeCamera, OutputError> {
        PinholeCamera::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| OutputError::Invalid(format!("checkpoint camera: {e}")))
    }
}

/// Pose as translation plus `(x, y, z, w)` quaternion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub translation: [f64; 3],
    pub rotation_xyzw: [f64; 4],
}

impl From<&SE3Pose> for PoseRecord {
    fn from(p: &SE3Pose) -> Self {
        let q = p.rotation.quaternion();
        Self {
            translation: [p.translation.x, p.translation.y, p.translation.z],
            rotation_xyzw: [q.i, q.j, q.k, q.w],
        }
    }
}

impl PoseRecord {
    pub fn pose(&self) -> SE3Pose {
        let [x, y, z, w] = self.rotation_xyzw;
        SE3Pose::new(
            UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)),
            Vector3::from(self.translation),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeRecord {
    pub frame: usize,
    pub timestamp: f64,
    pub pose: PoseRecord,
}

/// Checkpoint metadata stored next to the Gaussian file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub mapping_iterations: u64,
    /// SHA-256 of the canonical run configuration.
    pub config_sha256: String,
    pub rng_seed: u64,
    pub gaussian_count: usize,
    pub camera: CameraRecord,
    pub keyframes: Vec<KeyframeRecord>,
}

/// Map snapshot: Gaussians in the splat file format plus the metadata
/// needed to reproduce and render it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub gaussians: Vec<Gaussian3D>,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, camera: &PinholeCamera, output: &RunOutput) -> Self {
        Self {
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT.to_string(),
                mapping_iterations: output.mapping_iterations,
                config_sha256: config.hash(),
                rng_seed: config.rng_seed,
                gaussian_count: output.gaussians.len(),
                camera: camera.into(),
                keyframes: output
                    .trajectory
                    .iter()
                    .map(|e| KeyframeRecord {
                        frame: e.frame,
                        timestamp: e.timestamp,
                        pose: (&e.pose).into(),
                    })
                    .collect(),
            },
            gaussians: output.gaussians.clone(),
        }
    }

    pub fn trajectory(&self) -> Vec<TrajectoryEntry> {
        self.meta
            .keyframes
            .iter()
            .map(|k| TrajectoryEntry {
                frame: k.frame,
                timestamp: k.timestamp,
                pose: k.pose.pose(),
            })
            .collect()
    }

    /// Writes [`CHECKPOINT_FILE`] and [`MAP_FILE`] into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), OutputError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta_path = dir.join(CHECKPOINT_FILE);
        let text =
            serde_json::to_string_pretty(&self.meta).map_err(|source| OutputError::Json {
                path: meta_path.clone(),
                source,
            })?;
        write_text(&meta_path, &text)?;
        let map_path = dir.join(MAP_FILE);
        save_gaussians(&map_path, &self.gaussians).map_err(io_err(&map_path))
    }

    pub fn load(dir: &Path) -> Result<Self, OutputError> {
        let meta_path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|source| OutputError::Json {
                path: meta_path.clone(),
                source,
            })?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(OutputError::Invalid(format!(
                "{}: unsupported checkpoint format {:?}",
                meta_path.display(),
                meta.format
            )));
        }
        let map_path = dir.join(MAP_FILE);
        let gaussians = load_gaussians(&map_path)
            .map_err(|e| OutputError::Invalid(format!("{}: {e}", map_path.display())))?;
        if gaussians.len() != meta.gaussian_count {
            return Err(OutputError::Invalid(format!(
                "{}: {} Gaussians, metadata records {}",
                map_path.display(),
                gaussians.len(),
                meta.gaussian_count
            )));
        }
        Ok(Self { meta, gaussians })
    }
}

/// Writes the configuration, trajectory, metrics and checkpoint of a run
/// into `dir`, creating it if needed.
pub fn save_run(
    dir: &Path,
    config: &RunConfig,
    camera: &PinholeCamera,
    output: &RunOutput,
) -> Result<(), OutputError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_text(&dir.join(CONFIG_FILE), &config.to_toml())?;
    write_trajectory(&dir.join(TRAJECTORY_FILE), &output.trajectory)?;
    write_metrics(&dir.join(METRICS_FILE), &output.report)?;
    Checkpoint::new(config, camera, output).save(dir)
}

/// Artifacts of a finished run as read back from its output directory.
#[derive(Clone, Debug)]
pub struct SavedRun {
    pub config: RunConfig,
    pub checkpoint: Checkpoint,
}

pub fn load_run(dir: &Path) -> Result<SavedRun, OutputError> {
    let config_path = dir.join(CONFIG_FILE);
    let config = RunConfig::load(&config_path)
        .map_err(|e| OutputError::Invalid(format!("{}: {e}", config_path.display())))?;
    let checkpoint = Checkpoint::load(dir)?;
    if checkpoint.meta.config_sha256 != config.hash() {
        return Err(OutputError::Invalid(format!(
            "{}: configuration does not match the checkpoint",
            dir.display()
        )));
    }
    Ok(SavedRun { config, checkpoint })
}
