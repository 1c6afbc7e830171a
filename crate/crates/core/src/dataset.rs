//! Image sequences on disk: TUM-style directories and the synthetic
//! manifest layout.
//!
//! Color is stored as 8-bit PNG and held as `[0, 1]` floats. Depth is stored
//! as 16-bit PNG in units of `1 / depth_scale` with 0 marking missing depth.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{PinholeCamera, SE3Pose};
use crate::grid::{Grid, Image};

/// Depth units per scene unit used by TUM depth images.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;
/// Maximum timestamp gap, in seconds, for associating ground truth or depth
/// with a color frame.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;
pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# gsslam synthetic sequence v1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing index file {0}")]
    MissingIndex(PathBuf),
    #[error("{file}: malformed line {line}: {reason}")]
    MalformedLine {
        file: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset has no frames")]
    Empty,
    #[error("timestamps are not strictly increasing at frame {0}")]
    NonMonotoneTimestamps(usize),
    #[error("frame {index} is {got:?}, expected {expected:?}")]
    FrameDimensions {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFrame {
    pub timestamp: f64,
    pub image: Image,
    pub pose: Option<SE3Pose>,
    /// Metric depth, 0 where unknown.
    pub depth: Option<Grid<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub camera: PinholeCamera,
    pub frames: Vec<DatasetFrame>,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.frames.is_empty() {
            return Err(DatasetError::Empty);
        }
        self.camera
            .validate()
            .map_err(|e| DatasetError::Invalid(e.to_string()))?;
        let expected = (self.camera.width, self.camera.height);
        for (index, f) in self.frames.iter().enumerate() {
            if index > 0 && !(f.timestamp > self.frames[index - 1].timestamp) {
                return Err(DatasetError::NonMonotoneTimestamps(index));
            }
            for got in [Some(f.image.dims()), f.depth.as_ref().map(|d| d.dims())]
                .into_iter()
                .flatten()
            {
                if got != expected {
                    return Err(DatasetError::FrameDimensions {
                        index,
                        expected,
                        got,
                    });
                }
            }
        }
        Ok(())
    }

    /// Keeps the first `n` frames.
    pub fn clip(&mut self, n: usize) {
        self.frames.truncate(n);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Tum,
    Synthetic,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_rgb(path: &Path) -> Result<Image, DatasetError> {
    let img = image::open(path)
        .map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |x, y| {
        let p = img.get_pixel(x as u32, y as u32);
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0
    }))
}

pub fn write_rgb(path: &Path, image: &Image) -> Result<(), DatasetError> {
    let (w, h) = image.dims();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = image[(x as usize, y as usize)];
        image::Rgb([0, 1, 2].map(|k| (c[k].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path).map_err(|source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_depth(path: &Path, scale: f64) -> Result<Grid<f64>, DatasetError> {
    let img = image::open(path)
        .map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma16();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |x, y| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / scale
    }))
}

pub fn write_depth(path: &Path, depth: &Grid<f64>, scale: f64) -> Result<(), DatasetError> {
    let (w, h) = depth.dims();
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let v = (depth[(x as usize, y as usize)] * scale).round();
            image::Luma([v.clamp(0.0, u16::MAX as f64) as u16])
        });
    buf.save(path).map_err(|source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-comment, non-empty lines with their 1-based line numbers.
fn index_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingIndex(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| (i + 1, l.split_whitespace().map(str::to_string).collect()))
        .collect())
}

fn parse_floats(file: &Path, line: usize, fields: &[String]) -> Result<Vec<f64>, DatasetError> {
    fields
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DatasetError::MalformedLine {
                    file: file.to_path_buf(),
                    line,
                    reason: format!("'{s}' is not a finite number"),
                })
        })
        .collect()
}

/// Pose from `tx ty tz qx qy qz qw`; the quaternion must have nonzero norm.
fn parse_pose(file: &Path, line: usize, fields: &[String]) -> Result<SE3Pose, DatasetError> {
    let malformed = |reason: String| DatasetError::MalformedLine {
        file: file.to_path_buf(),
        line,
        reason,
    };
    if fields.len() != 7 {
        return Err(malformed(format!(
            "expected 7 pose values, found {}",
            fields.len()
        )));
    }
    let v = parse_floats(file, line, fields)?;
    let qn = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
    if !(qn > 1e-6) {
        return Err(malformed("quaternion has zero norm".into()));
    }
    Ok(SE3Pose::from_tum(
        [v[0], v[1], v[2]],
        [v[3], v[4], v[5], v[6]],
    ))
}

/// Entry whose timestamp is nearest to `t`, if within the association
/// tolerance.
fn associate<T: Clone>(entries: &[(f64, T)], t: f64) -> Option<T> {
    let i = entries.partition_point(|(s, _)| *s < t);
    [i.checked_sub(1), Some(i)]
        .into_iter()
        .flatten()
        .filter_map(|k| entries.get(k))
        .map(|(s, v)| ((s - t).abs(), v))
        .filter(|(d, _)| *d <= ASSOCIATION_TOLERANCE + 1e-12)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, v)| v.clone())
}

fn timestamped_files(dir: &Path, index: &str) -> Result<Vec<(f64, PathBuf)>, DatasetError> {
    let path = dir.join(index);
    let mut out = Vec::new();
    for (line, fields) in index_lines(&path)? {
        if fields.len() != 2 {
            return Err(DatasetError::MalformedLine {
                file: path,
                line,
                reason: format!(
                    "expected 'timestamp filename', found {} fields",
                    fields.len()
                ),
            });
        }
        let t = parse_floats(&path, line, &fields[..1])?[0];
        out.push((t, dir.join(&fields[1])));
    }
    Ok(out)
}

/// Reads a TUM-style directory: `rgb.txt`, `calibration.txt` with
/// `fx fy cx cy`, and optional `groundtruth.txt` and `depth.txt`.
pub fn load_tum(dir: &Path) -> Result<Dataset, DatasetError> {
    let rgb = timestamped_files(dir, "rgb.txt")?;
    if rgb.is_empty() {
        return Err(DatasetError::Empty);
    }
    let calib_path = dir.join("calibration.txt");
    let calib = index_lines(&calib_path)?;
    let (line, fields) = calib
        .first()
        .ok_or_else(|| DatasetError::MissingIndex(calib_path.clone()))?;
    let k = parse_floats(&calib_path, *line, fields)?;
    if k.len() != 4 {
        return Err(DatasetError::MalformedLine {
            file: calib_path,
            line: *line,
            reason: "expected 'fx fy cx cy'".into(),
        });
    }
    let gt_path = dir.join("groundtruth.txt");
    let mut gt = Vec::new();
    if gt_path.is_file() {
        for (line, fields) in index_lines(&gt_path)? {
            if fields.len() != 8 {
                return Err(DatasetError::MalformedLine {
                    file: gt_path,
                    line,
                    reason: format!("expected 8 fields, found {}", fields.len()),
                });
            }
            let t = parse_floats(&gt_path, line, &fields[..1])?[0];
            gt.push((t, parse_pose(&gt_path, line, &fields[1..])?));
        }
        gt.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let depth_index = if dir.join("depth.txt").is_file() {
        let mut d = timestamped_files(dir, "depth.txt")?;
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        d
    } else {
        Vec::new()
    };
    let mut frames = Vec::with_capacity(rgb.len());
    for (t, path) in &rgb {
        let depth = match associate(&depth_index, *t) {
            Some(p) => Some(read_depth(&p, TUM_DEPTH_SCALE)?),
            None => None,
        };
        frames.push(DatasetFrame {
            timestamp: *t,
            image: read_rgb(path)?,
            pose: associate(&gt, *t),
            depth,
        });
    }
    let (w, h) = frames[0].image.dims();
    let dataset = Dataset {
        camera: PinholeCamera {
            fx: k[0],
            fy: k[1],
            cx: k[2],
            cy: k[3],
            width: w,
            height: h,
        },
        frames,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes `dataset` as a manifest plus per-frame PNGs.
pub fn save_synthetic(dir: &Path, dataset: &Dataset, depth_scale: f64) -> Result<(), DatasetError> {
    dataset.validate()?;
    for sub in ["rgb", "depth"] {
        fs::create_dir_all(dir.join(sub)).map_err(io_err(dir))?;
    }
    let c = &dataset.camera;
    let mut text = String::new();
    let _ = writeln!(text, "{MANIFEST_HEADER}");
    let _ = writeln!(
        text,
        "camera {} {} {} {} {} {}",
        c.fx, c.fy, c.cx, c.cy, c.width, c.height
    );
    let _ = writeln!(text, "depth_scale {depth_scale}");
    let _ = writeln!(text, "frames {}", dataset.frames.len());
    for (i, f) in dataset.frames.iter().enumerate() {
        let rgb = format!("rgb/{i:05}.png");
        write_rgb(&dir.join(&rgb), &f.image)?;
        let depth = match &f.depth {
            Some(d) => {
                let name = format!("depth/{i:05}.png");
                write_depth(&dir.join(&name), d, depth_scale)?;
                name
            }
            None => "-".into(),
        };
        let pose = match &f.pose {
            Some(p) => {
                let t = p.translation;
                let q = p.rotation.quaternion();
                format!("{} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w)
            }
            None => "-".into(),
        };
        let _ = writeln!(text, "frame {} {rgb} {depth} {pose}", f.timestamp);
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn load_synthetic(dir: &Path) -> Result<Dataset, DatasetError> {
    let path = dir.join(MANIFEST_FILE);
    let lines = index_lines(&path)?;
    let malformed = |line: usize, reason: &str| DatasetError::MalformedLine {
        file: path.clone(),
        line,
        reason: reason.to_string(),
    };
    let mut camera = None;
    let mut depth_scale = None;
    let mut declared = None;
    let mut frames = Vec::new();
    for (line, fields) in &lines {
        match fields[0].as_str() {
            "camera" if fields.len() == 7 => {
                let k = parse_floats(&path, *line, &fields[1..5])?;
                let dims: Vec<usize> = fields[5..7]
                    .iter()
                    .map(|s| s.parse().map_err(|_| malformed(*line, "bad image size")))
                    .collect::<Result<_, _>>()?;
                camera = Some(PinholeCamera {
                    fx: k[0],
                    fy: k[1],
                    cx: k[2],
                    cy: k[3],
                    width: dims[0],
                    height: dims[1],
                });
            }
            "depth_scale" if fields.len() == 2 => {
                depth_scale = Some(parse_floats(&path, *line, &fields[1..])?[0]);
            }
            "frames" if fields.len() == 2 => {
                declared = Some(
                    fields[1]
                        .parse::<usize>()
                        .map_err(|_| malformed(*line, "bad frame count"))?,
                );
            }
            "frame" if fields.len() == 4 || fields.len() == 11 => {
                let t = parse_floats(&path, *line, &fields[1..2])?[0];
                let scale =
                    depth_scale.ok_or_else(|| malformed(*line, "frame before depth_scale"))?;
                let depth = match fields[3].as_str() {
                    "-" => None,
                    name => Some(read_depth(&dir.join(name), scale)?),
                };
                let pose = if fields.len() == 11 {
                    Some(parse_pose(&path, *line, &fields[4..])?)
                } else {
                    None
                };
                frames.push(DatasetFrame {
                    timestamp: t,
                    image: read_rgb(&dir.join(&fields[2]))?,
                    pose,
                    depth,
                });
            }
            _ => return Err(malformed(*line, "unrecognized record")),
        }
    }
    let camera =
        camera.ok_or_else(|| DatasetError::Invalid("manifest has no camera record".into()))?;
    if let Some(n) = declared {
        if n != frames.len() {
            return Err(DatasetError::Invalid(format!(
                "manifest declares {n} frames, lists {}",
                frames.len()
            )));
        }
    }
    let dataset = Dataset { camera, frames };
    dataset.validate()?;
    Ok(dataset)
}

/// Loads a directory in the given format, or detects it from the presence of
/// a manifest.
pub fn load_dataset(dir: &Path, format: Option<DatasetFormat>) -> Result<Dataset, DatasetError> {
    let format = format.unwrap_or(if dir.join(MANIFEST_FILE).is_file() {
        DatasetFormat::Synthetic
    } else {
        DatasetFormat::Tum
    });
    match format {
        DatasetFormat::Tum => load_tum(dir),
        DatasetFormat::Synthetic => load_synthetic(dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        fs::write(dir.join(name), text).unwrap();
    }

    fn tum_fixture(gt: &str) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("rgb")).unwrap();
        let img = Grid::from_fn(4, 3, |x, y| {
            Vector3::new(x as f64 / 3.0, y as f64 / 2.0, 0.5)
        });
        for name in ["rgb/a.png", "rgb/b.png"] {
            write_rgb(&dir.path().join(name), &img).unwrap();
        }
        write(
            dir.path(),
            "rgb.txt",
            "# color\n1.00 rgb/a.png\n1.10 rgb/b.png\n",
        );
        write(dir.path(), "calibration.txt", "3.0 3.0 1.5 1.0\n");
        write(dir.path(), "groundtruth.txt", gt);
        dir
    }

    #[test]
    fn tum_two_frames_with_association() {
        let dir = tum_fixture("# gt\n1.01 0 0 0 0 0 0 1\n1.15 1 2 3 0 0 0 1\n");
        let ds = load_dataset(dir.path(), None).unwrap();
        assert_eq!(ds.frames.len(), 2);
        assert!(ds.frames[1].timestamp > ds.frames[0].timestamp);
        assert!(ds.frames[0].pose.is_some());
        assert!(ds.frames[1].pose.is_none());
        assert_eq!(ds.camera.width, 4);
    }

    #[test]
    fn tum_malformed_quaternion_reports_line() {
        let dir = tum_fixture("# gt\n1.00 0 0 0 0 0 0 1\n1.10 0 0 0 0 0 0 0\n");
        match load_tum(dir.path()) {
            Err(DatasetError::MalformedLine { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let dir = tum_fixture("1.00 0 0 0 x 0 0 1\n");
        assert!(matches!(
            load_tum(dir.path()),
            Err(DatasetError::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn missing_index_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_tum(dir.path()),
            Err(DatasetError::MissingIndex(_))
        ));
    }

    #[test]
    fn synthetic_round_trip() {
        let spec = crate::scene::SceneSpec {
            frames: 3,
            width: 24,
            height: 16,
            focal_px: 20.0,
            ..Default::default()
        };
        let scene = crate::scene::generate_scene(&spec, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_synthetic(dir.path(), &scene.dataset, TUM_DEPTH_SCALE).unwrap();
        let back = load_dataset(dir.path(), None).unwrap();
        assert_eq!(back.camera, scene.dataset.camera);
        for (a, b) in scene.dataset.frames.iter().zip(&back.frames) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.timestamp, b.timestamp);
            let (pa, pb) = (a.pose.unwrap(), b.pose.unwrap());
            assert!((pa.to_matrix() - pb.to_matrix()).amax() < 1e-9);
            let (da, db) = (a.depth.as_ref().unwrap(), b.depth.as_ref().unwrap());
            assert!(da
                .iter()
                .zip(db.iter())
                .all(|(x, y)| (x - y).abs() <= 0.5 / TUM_DEPTH_SCALE + 1e-12));
        }
    }
}
